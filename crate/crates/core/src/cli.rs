//! Command-line surface. Every subcommand writes under `<run_root>/<config hash>`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::backbone::ModelConfig;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::cognition::{kb_build_per_scenario, KnowledgeBase};
use crate::config::{ProviderKind, RunConfig};
use crate::curriculum::CompositionClass;
use crate::error::{Error, Result};
use crate::evalbench::{emit_report, eval_matrix, eval_sequences, EvalOptions, EvalReport, ModelPredictor, ReportFormat};
use crate::io::{read_to_string, sha256_hex, to_json_sig17, write_atomic};
use crate::model::WorldModel;
use crate::repro::{Suite, TAIL};
use crate::synthesis::{
    seed_pool, synthesize, AuditLog, Completer, HttpProvider, MockGrammar, MockProvider, Pool, ProviderClient, ROUGE_THRESHOLD,
};
use crate::synthworld::{
    gen_dataset, gen_world, generate, group_episodes, load_dataset, load_samples, scenario_totals, Dataset, DatasetConfig, Manifest,
    WorldSpec,
};
use crate::training::{cognitive_tune, grad_check, grad_probe, pretrain, GradCheckConfig};

#[derive(Debug, Parser)]
#[command(name = "worldmodel", version, about = "Desk-scale multimodal world model toolkit")]
pub struct Cli {
    /// TOML run configuration; `seed` is mandatory unless given with --seed.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed, overriding the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config override `section.key=value` (TOML literal); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    /// Tuned checkpoint if present, else the pretrained one.
    Auto,
    Pretrained,
    Tuned,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic world (world.json).
    GenWorld,
    /// Generate the transition dataset with its manifest and latent sidecar.
    GenData,
    /// Pretrain the world model with the configured schedule.
    Train,
    /// Cognitive-augmented tuning of the reflector on a pretrained checkpoint.
    Tune,
    /// Export one knowledge base per scenario from the knowledge split.
    KbBuild,
    /// Score the eight modality-transfer tasks.
    EvalMatrix {
        #[arg(long, value_enum, default_value = "auto")]
        model: ModelChoice,
        /// Append the published reference rows to the markdown report.
        #[arg(long)]
        compare_reference: bool,
    },
    /// Score sequence prediction with working memory.
    EvalSeq {
        #[arg(long, value_enum, default_value = "auto")]
        model: ModelChoice,
        #[arg(long)]
        compare_reference: bool,
    },
    /// Grow the instruction pool and complete plans with the model.
    Synthesize {
        /// Provider backend; `http` reads the endpoint and credential variable from the config.
        #[arg(long, value_enum)]
        provider: Option<ProviderKind>,
        #[arg(long, value_enum, default_value = "auto")]
        model: ModelChoice,
    },
    /// Finite-difference gradient check on a small model.
    GradCheck,
    /// Parse a dataset JSONL and compare per-scenario counts with its manifest.
    ValidateData {
        path: PathBuf,
        /// Manifest to compare against; defaults to `<stem>.manifest.json` next to the data.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// World that generated the data; defaults to `world.json` next to it, else the run's world.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Run every acceptance check end to end and write summary.json.
    Repro {
        /// Accepted for symmetry; the full suite always runs.
        #[arg(long)]
        all: bool,
    },
}

/// Outcome of a subcommand that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// Ran, but a check it reports on failed.
    CheckFailed,
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => read_to_string(p)?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.insert(0, format!("seed={s}"));
    }
    RunConfig::from_toml(&text, &overrides)
}

pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    pub fn open(cfg: RunConfig) -> Result<Self> {
        let dir = cfg.run_dir()?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_atomic(&dir.join("config.json"), &cfg.canonical()?)?;
        Ok(Run { cfg, dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn world(&self) -> Result<WorldSpec> {
        let p = self.path("world.json");
        if p.exists() {
            return WorldSpec::load(&p);
        }
        let w = gen_world(self.cfg.seed, &self.cfg.world)?;
        w.save(&p)?;
        Ok(w)
    }

    pub fn data(&self, world: &WorldSpec) -> Result<Dataset> {
        if self.path("data.jsonl").exists() {
            return load_dataset(&self.dir, "data", &world.text_encoder);
        }
        Ok(gen_dataset(world, &self.cfg.data, &self.dir, "data")?.0)
    }

    fn model(&self, choice: ModelChoice) -> Result<(WorldModel, &'static str)> {
        let tuned = self.path("tuned.ckpt.json");
        let pre = self.path("pretrain.ckpt.json");
        let (path, name) = match choice {
            ModelChoice::Tuned => (tuned, "tuned"),
            ModelChoice::Pretrained => (pre, "pretrained"),
            ModelChoice::Auto if tuned.exists() => (tuned, "tuned"),
            ModelChoice::Auto => (pre, "pretrained"),
        };
        if !path.exists() {
            return Err(Error::Data(format!("{} not found; run `train` (and `tune`) first", path.display())));
        }
        Ok((load_checkpoint(&path)?.0, name))
    }

    fn kbs(&self, data: &Dataset) -> Result<BTreeMap<String, KnowledgeBase>> {
        let view = data.split_view();
        kb_build_per_scenario(&view.kb.values().flatten().cloned().collect::<Vec<_>>())
    }

    fn emit(&self, report: &EvalReport, stem: &str, compare: bool) -> Result<()> {
        for (fmt, ext) in [(ReportFormat::Json, "json"), (ReportFormat::Csv, "csv"), (ReportFormat::Markdown, "md")] {
            emit_report(report, fmt, &self.path(&format!("{stem}.{ext}")), compare)?;
        }
        print!("{}", report.to_markdown(compare));
        Ok(())
    }
}

fn validate_data(path: &Path, manifest: Option<&Path>, world: &WorldSpec) -> Result<Outcome> {
    let samples = load_samples(path, &world.text_encoder)?;
    let counts = scenario_totals(&samples);
    println!("{} samples", samples.len());
    for (sc, n) in &counts {
        println!("{sc}\t{n}");
    }
    let mpath = match manifest {
        Some(m) => m.to_path_buf(),
        None => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            path.with_file_name(format!("{stem}.manifest.json"))
        }
    };
    if !mpath.exists() {
        println!("no manifest at {}; counts not compared", mpath.display());
        return Ok(Outcome::Ok);
    }
    let m: Manifest = crate::io::read_json(&mpath)?;
    let expected: BTreeMap<String, usize> = m.per_scenario.iter().map(|(k, v)| (k.clone(), v.samples)).collect();
    if expected != counts || m.n_samples != samples.len() {
        return Err(Error::Data(format!("per-scenario counts {counts:?} differ from manifest {expected:?}")));
    }
    let sha = sha256_hex(read_to_string(path)?.as_bytes());
    if sha != m.dataset_sha256 {
        return Err(Error::Data(format!("dataset sha256 {sha} differs from manifest {}", m.dataset_sha256)));
    }
    println!("counts and sha256 match {}", mpath.display());
    Ok(Outcome::Ok)
}

fn provider_for(run: &Run, world: &WorldSpec, kind: ProviderKind) -> Result<Box<dyn ProviderClient>> {
    let p = &run.cfg.provider;
    Ok(match kind {
        ProviderKind::Mock => Box::new(MockProvider::new(run.cfg.synthesis.seed, MockGrammar::from_world(world)?)),
        ProviderKind::Http => Box::new(HttpProvider::new(
            p.endpoint.clone(),
            p.credential_env.clone(),
            p.retry.clone(),
            Some(AuditLog::new(run.path("audit.jsonl"))),
        )),
    })
}

/// Execute a parsed command line.
pub fn execute(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    let run = Run::open(cfg)?;
    let cfg = &run.cfg;
    eprintln!("run directory {}", run.dir.display());
    match &cli.command {
        Command::GenWorld => {
            let w = run.world()?;
            println!("world seed {}: {} actions, {} scenarios", cfg.seed, w.actions.len(), w.scenarios.len());
        }
        Command::GenData => {
            let w = run.world()?;
            let ds = run.data(&w)?;
            println!("{} samples in {} episodes", ds.samples.len(), ds.manifest.n_episodes);
            for (sc, c) in &ds.manifest.per_scenario {
                println!("{sc}\tsamples {}\ttrain {}\ttest {}\tkb {}", c.samples, c.train, c.test, c.kb);
            }
        }
        Command::Train => {
            let w = run.world()?;
            let ds = run.data(&w)?;
            let pool = w.non_esoteric(&ds.split_view().train);
            let mut m = WorldModel::new(cfg.model.clone())?;
            let curve = pretrain(&mut m, &pool, &cfg.train)?;
            save_checkpoint(&m, None, &run.path("pretrain.ckpt.json"))?;
            write_atomic(&run.path("pretrain.loss.csv"), curve.to_csv().as_bytes())?;
            for c in CompositionClass::ALL {
                if let Some(l) = curve.tail_mean(c, TAIL) {
                    println!("{}\tfinal loss {l:.4}", c.name());
                }
            }
        }
        Command::Tune => {
            let w = run.world()?;
            let ds = run.data(&w)?;
            let (mut m, _) = run.model(ModelChoice::Pretrained)?;
            let before = m.checksums();
            let view = ds.split_view();
            let kbs = run.kbs(&ds)?;
            let curve = cognitive_tune(&mut m, &view.train, &group_episodes(&view.train), &kbs, &cfg.tune)?;
            save_checkpoint(&m, None, &run.path("tuned.ckpt.json"))?;
            write_atomic(&run.path("tune.loss.csv"), curve.to_csv().as_bytes())?;
            let after = m.checksums();
            let changes: BTreeMap<String, bool> = before.iter().map(|(c, h)| (c.name().to_string(), after.get(c) != Some(h))).collect();
            write_atomic(&run.path("tune.checksums.json"), &to_json_sig17(&serde_json::json!({"before": before, "after": after}))?)?;
            for (c, changed) in changes {
                println!("{c}\t{}", if changed { "changed" } else { "unchanged" });
            }
        }
        Command::KbBuild => {
            let w = run.world()?;
            let ds = run.data(&w)?;
            let dir = run.path("kb");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (sc, kb) in run.kbs(&ds)? {
                kb.save(&dir.join(format!("{sc}.jsonl")))?;
                println!("{sc}\t{} entries", kb.len());
            }
        }
        Command::EvalMatrix { model, compare_reference } => {
            let w = run.world()?;
            let ds = run.data(&w)?;
            let (m, which) = run.model(*model)?;
            let view = ds.split_view();
            let opts = EvalOptions { top_k: cfg.cognition.top_k, seed: cfg.seed, config_hash: cfg.hash()?, train: Some(&view.train) };
            let r = eval_matrix(&ModelPredictor(&m), &view.test, &run.kbs(&ds)?, &cfg.eval.matrix_variants, &opts)?;
            eprintln!("model: {which}");
            run.emit(&r, "matrix", *compare_reference)?;
        }
        Command::EvalSeq { model, compare_reference } => {
            let w = run.world()?;
            let (m, which) = run.model(*model)?;
            let seq = generate(
                &w,
                &DatasetConfig {
                    seed: cfg.eval.sequence_seed,
                    n_episodes: cfg.eval.sequence_episodes,
                    split: None,
                    ..cfg.data.clone()
                },
            )?;
            let opts = EvalOptions { top_k: cfg.cognition.top_k, seed: cfg.seed, config_hash: cfg.hash()?, train: None };
            let r = eval_sequences(&ModelPredictor(&m), &seq.episodes(), &cfg.eval.lengths, &cfg.eval.sequence_variants, &opts)?;
            eprintln!("model: {which}");
            run.emit(&r, "sequence", *compare_reference)?;
        }
        Command::Synthesize { provider, model } => {
            let w = run.world()?;
            let ds = run.data(&w)?;
            let (m, _) = run.model(*model)?;
            let kind = provider.unwrap_or(cfg.provider.kind);
            let client = provider_for(&run, &w, kind)?;
            let seeds = MockGrammar::from_world(&w)?.seed_instructions(cfg.synthesis.seed_pool_size, cfg.synthesis.seed, ROUGE_THRESHOLD)?;
            let pool_path = run.path("pool.jsonl");
            let mut pool = if pool_path.exists() { Pool::load(&pool_path)? } else { seed_pool(&seeds, Some(pool_path))? };
            let grounding: Vec<_> = ds.split_view().kb.values().flatten().cloned().collect();
            let completer = Completer { model: &m, encoder: &w.text_encoder, grounding: &grounding, history: cfg.synthesis.history };
            let summary = synthesize(&mut pool, client.as_ref(), Some(&completer), &cfg.synthesis)?;
            write_atomic(&run.path("synthesis.json"), &to_json_sig17(&summary)?)?;
            println!(
                "pool {} records after {} rounds; {} accepted, {} rejected",
                pool.len(),
                summary.rounds,
                summary.accepted,
                summary.rejected.len()
            );
        }
        Command::GradCheck => {
            let w = run.world()?;
            let ds = run.data(&w)?;
            let gc = &cfg.grad_check;
            let m = WorldModel::new(ModelConfig { d_model: gc.d_model, ..cfg.model.clone() })?;
            let probe = grad_probe(&ds.samples, gc.probe_samples, cfg.seed)?;
            let rep = grad_check(&m, &probe, &GradCheckConfig { h: gc.h, entries_per_param: gc.entries_per_param, seed: cfg.seed, ..GradCheckConfig::default() })?;
            write_atomic(&run.path("gradcheck.json"), &to_json_sig17(&rep)?)?;
            for (c, g) in &rep.groups {
                println!("{c}\t{g:?}");
            }
            let worst = rep.max_rel_err();
            println!("max relative error {worst:.3e}");
            if worst >= 1e-4 {
                return Err(Error::GradientCheck(format!("max relative error {worst:.3e}")));
            }
        }
        Command::ValidateData { path, manifest, world } => {
            let sibling = path.with_file_name("world.json");
            let w = match world {
                Some(p) => WorldSpec::load(p)?,
                None if sibling.exists() => WorldSpec::load(&sibling)?,
                None => run.world()?,
            };
            return validate_data(path, manifest.as_deref(), &w);
        }
        Command::Repro { .. } => {
            let mut suite = Suite::new(cfg.clone(), Some(run.path("repro")))?;
            let summary = suite.run_all(|r| println!("{}", r.line()))?;
            write_atomic(&run.path("summary.json"), &to_json_sig17(&summary)?)?;
            if !summary.all_pass {
                return Ok(Outcome::CheckFailed);
            }
        }
    }
    Ok(Outcome::Ok)
}

/// Process exit code for a command line.
pub fn main_with(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::CheckFailed) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.class().exit_code()
        }
    }
}
