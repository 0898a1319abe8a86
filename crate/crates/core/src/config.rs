//! Run configuration: one TOML file with a mandatory top-level `seed` and
//! defaulted sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::evalbench::Variant;
use crate::io::{read_to_string, sha256_hex, to_json_sig17};
use crate::synthesis::{RetryPolicy, SynthesisConfig};
use crate::synthworld::{DatasetConfig, WorldConfig};
use crate::training::{TrainConfig, TuneConfig};

/// Sections whose own `seed` defaults to the top-level seed.
const SEEDED_SECTIONS: [&str; 5] = ["data", "model", "train", "tune", "synthesis"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CognitionConfig {
    /// Retrieved samples per knowledge query.
    pub top_k: usize,
}

impl Default for CognitionConfig {
    fn default() -> Self {
        CognitionConfig { top_k: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub matrix_variants: Vec<Variant>,
    pub sequence_variants: Vec<Variant>,
    pub lengths: Vec<usize>,
    /// Episodes generated for the sequence benchmark.
    pub sequence_episodes: usize,
    pub sequence_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            matrix_variants: vec![Variant::Base, Variant::Ck, Variant::Rk],
            sequence_variants: vec![Variant::Base, Variant::Cm, Variant::Rm],
            lengths: vec![1, 3, 5, 7],
            sequence_episodes: 200,
            sequence_seed: 1001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: String,
    /// Environment variable holding the bearer token.
    pub credential_env: Option<String>,
    pub retry: RetryPolicy,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            endpoint: "http://127.0.0.1:8080/v1/complete".into(),
            credential_env: Some("WORLDMODEL_PROVIDER_KEY".into()),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    pub d_model: usize,
    pub probe_samples: usize,
    pub entries_per_param: usize,
    pub h: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        GradCheckSection {
            d_model: 16,
            probe_samples: 4,
            entries_per_param: 6,
            h: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_run_root")]
    pub run_root: PathBuf,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub data: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub tune: TuneConfig,
    #[serde(default)]
    pub cognition: CognitionConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub grad_check: GradCheckSection,
}

fn default_run_root() -> PathBuf {
    PathBuf::from("runs")
}

/// Parse `key.path=value`, where value is a TOML literal; bare words are taken as strings.
fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{s}` is not key=value")))?;
    let path: Vec<String> = k.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::InvalidConfig(format!("bad override key `{k}`")));
    }
    let v = v.trim();
    let value = toml::from_str::<toml::Table>(&format!("x = {v}"))
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut t = table;
    for p in parents {
        t = t
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("`{p}` is not a section")))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Parse TOML text with overrides applied before validation.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut table, &path, value)?;
        }
        let seed = table
            .get("seed")
            .ok_or_else(|| Error::InvalidConfig("missing mandatory key `seed`".into()))?
            .clone();
        for s in SEEDED_SECTIONS {
            let section = table.entry(s).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let Some(t) = section.as_table_mut() {
                t.entry("seed").or_insert_with(|| seed.clone());
            }
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_toml(&read_to_string(path)?, overrides)
    }

    /// A config carrying only the seed.
    pub fn with_seed(seed: u64) -> Self {
        Self::from_toml(&format!("seed = {seed}"), &[]).expect("default config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.model.d_enc != self.world.d_enc {
            return Err(Error::InvalidConfig(format!(
                "model.d_enc {} must equal world.d_enc {}",
                self.model.d_enc, self.world.d_enc
            )));
        }
        if self.eval.lengths.is_empty() || self.eval.lengths.contains(&0) {
            return Err(Error::InvalidConfig("eval.lengths must be non-empty and positive".into()));
        }
        if self.eval.matrix_variants.iter().any(|v| v.uses_memory()) {
            return Err(Error::InvalidConfig("eval.matrix_variants cannot include memory variants".into()));
        }
        if self.eval.sequence_variants.iter().any(|v| v.uses_knowledge()) {
            return Err(Error::InvalidConfig("eval.sequence_variants cannot include knowledge variants".into()));
        }
        if self.synthesis.target_pool_size < self.synthesis.seed_pool_size {
            return Err(Error::InvalidConfig("synthesis.target_pool_size is below seed_pool_size".into()));
        }
        Ok(())
    }

    /// Canonical JSON of the resolved config.
    pub fn canonical(&self) -> Result<Vec<u8>> {
        to_json_sig17(self)
    }

    /// Hash of the canonical config. `run_root` says where a run lives, not what it
    /// is, so it is left out.
    pub fn hash(&self) -> Result<String> {
        let identity = RunConfig { run_root: PathBuf::new(), ..self.clone() };
        Ok(sha256_hex(&identity.canonical()?))
    }

    /// `<run_root>/<first 16 hex digits of the config hash>`
    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.run_root.join(&self.hash()?[..16]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        let e = RunConfig::from_toml("[model]\nd_model = 16\n", &[]).unwrap_err();
        assert!(e.to_string().contains("seed"));
    }

    #[test]
    fn unknown_key_names_the_key() {
        let e = RunConfig::from_toml("seed = 1\n[train]\nbatchsize = 4\n", &[]).unwrap_err();
        assert!(matches!(e, Error::InvalidConfig(_)));
        assert!(e.to_string().contains("batchsize"), "{e}");
        let e = RunConfig::from_toml("seed = 1\nmystery = 2\n", &[]).unwrap_err();
        assert!(e.to_string().contains("mystery"), "{e}");
    }

    #[test]
    fn sections_inherit_seed_unless_set() {
        let c = RunConfig::from_toml("seed = 9\n[train]\nseed = 3\n", &[]).unwrap();
        assert_eq!((c.train.seed, c.tune.seed, c.model.seed, c.data.seed), (3, 9, 9, 9));
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let base = RunConfig::from_toml("seed = 1\n", &[]).unwrap();
        let o = RunConfig::from_toml("seed = 1\n", &["train.schedule=naive".into(), "train.epochs=4".into()]).unwrap();
        assert_eq!(o.train.schedule, crate::training::ScheduleKind::Naive);
        assert_eq!(o.train.epochs, 4);
        assert_ne!(base.hash().unwrap(), o.hash().unwrap());
        assert_eq!(base.hash().unwrap(), RunConfig::with_seed(1).hash().unwrap());
        assert!(RunConfig::from_toml("seed = 1\n", &["nokey".into()]).is_err());
    }

    #[test]
    fn canonical_form_round_trips() {
        let c = RunConfig::from_toml("seed = 5\n[eval]\nlengths = [1, 2]\n", &[]).unwrap();
        let back: RunConfig = serde_json::from_slice(&c.canonical().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.run_dir().unwrap().file_name().unwrap().len(), 16);
        let moved = RunConfig::from_toml("seed = 5\nrun_root = \"elsewhere\"\n[eval]\nlengths = [1, 2]\n", &[]).unwrap();
        assert_eq!(moved.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn cross_section_checks() {
        assert!(RunConfig::from_toml("seed = 1\n[model]\nd_enc = 8\n", &[]).is_err());
        assert!(RunConfig::from_toml("seed = 1\n[eval]\nmatrix_variants = [\"RM\"]\n", &[]).is_err());
    }
}
