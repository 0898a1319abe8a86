//! JSON checkpoints.
//!
//! Layout:
//!
//! ```text
//! {
//!   "format": "worldmodel-checkpoint",
//!   "version": 1,
//!   "config": { ...ModelConfig... },
//!   "freeze": [component, ...],
//!   "checksums": { component: sha256-hex, ... },
//!   "render": { "matrix": {...}, "bias": [...] },
//!   "render_checksum": sha256-hex of the canonical render JSON,
//!   "params": [ { "name", "component", "rows", "cols", "data": [...] }, ... ],
//!   "rng": { "seed": hex, "stream": u64, "word_pos": decimal string } | null
//! }
//! ```
//!
//! Floats are written with 17 significant digits so a load reproduces every
//! bit. Checksums are recomputed on load and any mismatch is an error.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::decoder::RenderMap;
use crate::error::{Error, Result};
use crate::io::{read_to_string, sha256_hex, to_json_sig17, write_atomic};
use crate::model::WorldModel;
use crate::params::{Component, FreezePlan, ParamStore};
use crate::tensor::Matrix;

pub const FORMAT: &str = "worldmodel-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(
            self.word_pos
                .parse()
                .map_err(|e| Error::Checkpoint(format!("rng word_pos: {e}")))?,
        );
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    component: Component,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    freeze: FreezePlan,
    checksums: BTreeMap<Component, String>,
    render: RenderMap,
    render_checksum: String,
    params: Vec<ParamRecord>,
    rng: Option<RngState>,
}

pub fn checkpoint_bytes(model: &WorldModel, rng: Option<&ChaCha8Rng>) -> Result<Vec<u8>> {
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        freeze: model.freeze.clone(),
        checksums: model.checksums(),
        render: model.render.clone(),
        render_checksum: sha256_hex(&to_json_sig17(&model.render)?),
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                component: p.component,
                rows: p.value.rows,
                cols: p.value.cols,
                data: p.value.data.clone(),
            })
            .collect(),
        rng: rng.map(RngState::capture),
    };
    to_json_sig17(&file)
}

pub fn save_checkpoint(model: &WorldModel, rng: Option<&ChaCha8Rng>, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model, rng)?)
}

pub fn parse_checkpoint(text: &str) -> Result<(WorldModel, Option<ChaCha8Rng>)> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    let mut store = ParamStore::default();
    for p in file.params {
        if p.rows * p.cols != p.data.len() {
            return Err(Error::Checkpoint(format!("parameter {} has the wrong size", p.name)));
        }
        if store.id(&p.name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {}", p.name)));
        }
        store.add(p.name, p.component, Matrix::from_vec(p.rows, p.cols, p.data));
    }
    let actual = store.checksums();
    for c in actual.keys().chain(file.checksums.keys()) {
        if actual.get(c) != file.checksums.get(c) {
            return Err(Error::Checkpoint(format!("checksum mismatch for {c}")));
        }
    }
    if sha256_hex(&to_json_sig17(&file.render)?) != file.render_checksum {
        return Err(Error::Checkpoint("checksum mismatch for render map".into()));
    }
    let model = WorldModel::from_parts(file.config, store, file.render, file.freeze)?;
    let rng = file.rng.map(|r| r.restore()).transpose()?;
    Ok((model, rng))
}

pub fn load_checkpoint(path: &Path) -> Result<(WorldModel, Option<ChaCha8Rng>)> {
    parse_checkpoint(&read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> WorldModel {
        WorldModel::new(ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_enc: 4,
            k_sig: 2,
            seed: 11,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: f64 = rng.random();
        let bytes = checkpoint_bytes(&m, Some(&rng)).unwrap();
        let (back, rng2) = parse_checkpoint(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.render, m.render);
        let mut rng2 = rng2.unwrap();
        assert_eq!(rng.random::<u64>(), rng2.random::<u64>());
        assert_eq!(checkpoint_bytes(&back, None).unwrap(), checkpoint_bytes(&m, None).unwrap());
    }

    #[test]
    fn tampered_checkpoint_rejected() {
        let m = small();
        let text = String::from_utf8(checkpoint_bytes(&m, None).unwrap()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let first = &mut v["params"][0]["data"][0];
        *first = serde_json::json!(first.as_f64().unwrap() + 1.0);
        let err = parse_checkpoint(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(msg) if msg.contains("checksum")));

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["render"]["matrix"]["data"][0] = serde_json::json!(0.5);
        let err = parse_checkpoint(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(msg) if msg.contains("render")));

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["checksums"].as_object_mut().unwrap().remove("base");
        assert!(parse_checkpoint(&v.to_string()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        let m = small();
        save_checkpoint(&m, None, &p).unwrap();
        let (back, rng) = load_checkpoint(&p).unwrap();
        assert!(rng.is_none());
        assert_eq!(back.checksums(), m.checksums());
    }
}
