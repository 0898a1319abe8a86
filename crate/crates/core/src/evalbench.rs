//! Evaluation: the 8-task modality matrix, long-sequence evaluation and report rendering.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cognition::{kb_retrieve, KnowledgeBase, MemoryEntry};
use crate::error::{Error, Result};
use crate::io::{to_json_sig17, write_atomic};
use crate::model::{ContextInput, ContextMode, WorldModel};
use crate::reflector::ContextSource;
use crate::synthworld::{observe_state, Episode, LatentRecord, Sidecar, WorldSpec};
use crate::training::observe_masked;
use crate::types::{cosine_similarity, Embedding, Modality, TransitionSample, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "CK")]
    Ck,
    #[serde(rename = "RK")]
    Rk,
    #[serde(rename = "CM")]
    Cm,
    #[serde(rename = "RM")]
    Rm,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Base, Variant::Ck, Variant::Rk, Variant::Cm, Variant::Rm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Ck => "CK",
            Variant::Rk => "RK",
            Variant::Cm => "CM",
            Variant::Rm => "RM",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s}")))
    }

    pub fn uses_knowledge(self) -> bool {
        matches!(self, Variant::Ck | Variant::Rk)
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, Variant::Cm | Variant::Rm)
    }

    pub fn context_mode(self) -> Option<ContextMode> {
        match self {
            Variant::Base => None,
            Variant::Ck | Variant::Cm => Some(ContextMode::Raw),
            Variant::Rk | Variant::Rm => Some(ContextMode::Reflected),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalTask {
    pub inputs: BTreeSet<Modality>,
    pub outputs: BTreeSet<Modality>,
}

fn join(ms: &BTreeSet<Modality>) -> String {
    ms.iter().map(|m| m.name()).collect::<Vec<_>>().join("&")
}

impl EvalTask {
    pub fn new(inputs: &[Modality], outputs: &[Modality]) -> Self {
        EvalTask {
            inputs: inputs.iter().copied().collect(),
            outputs: outputs.iter().copied().collect(),
        }
    }

    pub fn label(&self) -> String {
        format!("{}->{}", join(&self.inputs), join(&self.outputs))
    }
}

/// The eight input/output combinations of the matrix, in column order.
pub fn matrix_tasks() -> Vec<EvalTask> {
    use Modality::*;
    vec![
        EvalTask::new(&[Image], &[Image]),
        EvalTask::new(&[Video], &[Video]),
        EvalTask::new(&[Audio], &[Audio]),
        EvalTask::new(&[Image, Audio], &[Video]),
        EvalTask::new(&[Video, Audio], &[Image]),
        EvalTask::new(&[Image], &[Video, Audio]),
        EvalTask::new(&[Video], &[Image, Audio]),
        EvalTask::new(&[Image, Video, Audio], &[Image, Video, Audio]),
    ]
}

/// One prediction request.
#[derive(Debug, Clone)]
pub struct Query<'a> {
    pub sample: &'a TransitionSample,
    pub state: WorldState,
    pub outputs: BTreeSet<Modality>,
    pub variant: Variant,
    pub contexts: Vec<ContextSource>,
}

pub trait Predictor: Sync {
    fn predict(&self, q: &Query) -> Result<BTreeMap<Modality, Embedding>>;
}

pub struct ModelPredictor<'a>(pub &'a WorldModel);

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, q: &Query) -> Result<BTreeMap<Modality, Embedding>> {
        let ctx = q.variant.context_mode().map(|mode| ContextInput::new(mode, &q.contexts));
        self.0.predict(&q.state, &q.sample.action, ctx.as_ref(), &q.outputs)
    }
}

/// Reads the true latent from the sidecar and observes it.
pub struct OraclePredictor<'a> {
    spec: &'a WorldSpec,
    latents: HashMap<&'a str, &'a LatentRecord>,
}

impl<'a> OraclePredictor<'a> {
    pub fn new(spec: &'a WorldSpec, sidecar: &'a Sidecar) -> Self {
        OraclePredictor { spec, latents: sidecar.index() }
    }
}

impl Predictor for OraclePredictor<'_> {
    fn predict(&self, q: &Query) -> Result<BTreeMap<Modality, Embedding>> {
        let id = q.sample.id();
        let rec = self.latents.get(id.as_str()).ok_or_else(|| Error::Data(format!("no latent for {id}")))?;
        let mods: Vec<Modality> = q.outputs.iter().copied().collect();
        Ok(observe_state(self.spec, &rec.z_after, &mods, None)?.modalities().clone())
    }
}

/// Isotropic Gaussian predictions seeded by sample id, modality and variant.
pub struct RandomPredictor {
    pub seed: u64,
    pub dim: usize,
}

impl Predictor for RandomPredictor {
    fn predict(&self, q: &Query) -> Result<BTreeMap<Modality, Embedding>> {
        let mut out = BTreeMap::new();
        for &m in &q.outputs {
            let h = Sha256::digest(format!("{}|{}|{}|{}", self.seed, q.sample.id(), m, q.variant).as_bytes());
            let mut rng = ChaCha8Rng::from_seed(h.into());
            out.insert(m, Embedding((0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()));
        }
        Ok(out)
    }
}

/// Compensated (Neumaier) sum; order-dependent only through the given order.
pub fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Matrix,
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub task: String,
    pub output: Modality,
    /// Mean cosine similarity in percent.
    pub score: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ReportKind,
    pub seed: u64,
    pub config_hash: String,
    pub testset_hash: String,
    pub cells: Vec<Cell>,
}

impl EvalReport {
    pub fn cell(&self, variant: Variant, task: &str, output: Modality) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.task == task && c.output == output)
    }

    pub fn tasks(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for c in &self.cells {
            if !seen.contains(&c.task) {
                seen.push(c.task.clone());
            }
        }
        seen
    }

    pub fn variants(&self) -> Vec<Variant> {
        let set: BTreeSet<Variant> = self.cells.iter().map(|c| c.variant).collect();
        set.into_iter().collect()
    }

    /// Mean over the output modalities of one task.
    pub fn task_mean(&self, variant: Variant, task: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant && c.task == task)
            .map(|c| c.score)
            .collect();
        (!v.is_empty()).then(|| neumaier_sum(v.iter().copied()) / v.len() as f64)
    }

    /// Sample-weighted mean over every cell of a variant.
    pub fn variant_mean(&self, variant: Variant) -> Option<f64> {
        let cells: Vec<&Cell> = self.cells.iter().filter(|c| c.variant == variant).collect();
        let n: usize = cells.iter().map(|c| c.count).sum();
        (n > 0).then(|| neumaier_sum(cells.iter().map(|c| c.score * c.count as f64)) / n as f64)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        to_json_sig17(self)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let kind = match self.kind {
            ReportKind::Matrix => "matrix",
            ReportKind::Sequence => "sequence",
        };
        let _ = writeln!(s, "# kind={kind}");
        let _ = writeln!(s, "# seed={}", self.seed);
        let _ = writeln!(s, "# config_hash={}", self.config_hash);
        let _ = writeln!(s, "# testset_hash={}", self.testset_hash);
        s.push_str("variant,task,output,score,count\n");
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{},{:e},{}", c.variant, c.task, c.output.name(), c.score, c.count);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut meta: BTreeMap<String, String> = BTreeMap::new();
        let mut cells = Vec::new();
        let bad = |l: &str| Error::Data(format!("bad report line: {l}"));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest.split_once('=').ok_or_else(|| bad(line))?;
                meta.insert(k.into(), v.into());
                continue;
            }
            if line.starts_with("variant,") {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(line));
            }
            cells.push(Cell {
                variant: Variant::parse(f[0])?,
                task: f[1].into(),
                output: Modality::parse(f[2])?,
                score: f[3].parse().map_err(|_| bad(line))?,
                count: f[4].parse().map_err(|_| bad(line))?,
            });
        }
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Data(format!("report missing {k}")));
        Ok(EvalReport {
            kind: match get("kind")?.as_str() {
                "matrix" => ReportKind::Matrix,
                "sequence" => ReportKind::Sequence,
                other => return Err(Error::Data(format!("unknown report kind {other}"))),
            },
            seed: get("seed")?.parse().map_err(|_| Error::Data("bad seed".into()))?,
            config_hash: get("config_hash")?,
            testset_hash: get("testset_hash")?,
            cells,
        })
    }

    /// Rows per variant, one column per task; joint outputs are slash-separated.
    pub fn to_markdown(&self, compare_reference: bool) -> String {
        let tasks = self.tasks();
        let mut s = String::new();
        let _ = writeln!(s, "config hash `{}`, seed {}\n", self.config_hash, self.seed);
        match self.kind {
            ReportKind::Matrix => {
                let split: Vec<(String, String)> = tasks
                    .iter()
                    .map(|t| {
                        let (a, b) = t.split_once("->").unwrap_or((t, ""));
                        (a.to_string(), b.to_string())
                    })
                    .collect();
                let _ = writeln!(s, "| Input Modality | {} |", split.iter().map(|x| x.0.as_str()).collect::<Vec<_>>().join(" | "));
                let _ = writeln!(s, "| Output Modality | {} |", split.iter().map(|x| x.1.as_str()).collect::<Vec<_>>().join(" | "));
            }
            ReportKind::Sequence => {
                let lens: Vec<&str> = tasks.iter().map(|t| t.trim_start_matches("L=")).collect();
                let _ = writeln!(s, "| Sequence Length | {} |", lens.join(" | "));
            }
        }
        let _ = writeln!(s, "|---|{}", "---|".repeat(tasks.len()));
        for v in self.variants() {
            let cells: Vec<String> = tasks
                .iter()
                .map(|t| {
                    let parts: Vec<String> = self
                        .cells
                        .iter()
                        .filter(|c| c.variant == v && &c.task == t)
                        .map(|c| format!("{:.1}", c.score))
                        .collect();
                    if parts.is_empty() { "-".into() } else { parts.join("/") }
                })
                .collect();
            let _ = writeln!(s, "| {} | {} |", v, cells.join(" | "));
        }
        if compare_reference {
            let refs = match self.kind {
                ReportKind::Matrix => reference_matrix(),
                ReportKind::Sequence => reference_sequence(),
            };
            s.push_str("\nReference numbers from the original large-scale system (not reproducible here, shown for comparison only):\n\n");
            let _ = writeln!(s, "| reference | {} |", tasks.join(" | "));
            let _ = writeln!(s, "|---|{}", "---|".repeat(tasks.len()));
            for (v, row) in refs {
                let cells: Vec<String> = tasks
                    .iter()
                    .map(|t| row.get(t.as_str()).map_or("-".into(), |x| x.iter().map(|f| format!("{f:.1}")).collect::<Vec<_>>().join("/")))
                    .collect();
                let _ = writeln!(s, "| {} | {} |", v, cells.join(" | "));
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path, compare_reference: bool) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Csv => report.to_csv().into_bytes(),
        ReportFormat::Markdown => report.to_markdown(compare_reference).into_bytes(),
    };
    write_atomic(path, &bytes)
}

type RefRow = BTreeMap<String, Vec<f64>>;

/// Published matrix scores (percent) of the full-scale system, for side-by-side display.
pub fn reference_matrix() -> Vec<(Variant, RefRow)> {
    let labels: Vec<String> = matrix_tasks().iter().map(EvalTask::label).collect();
    let rows: [(Variant, [&[f64]; 8]); 3] = [
        (
            Variant::Base,
            [&[71.6], &[72.2], &[45.6], &[58.0], &[79.2], &[65.2, 41.7], &[79.6, 34.6], &[78.0, 82.7, 37.1]],
        ),
        (
            Variant::Ck,
            [&[72.4], &[72.0], &[44.3], &[58.3], &[79.1], &[65.6, 41.2], &[76.1, 33.4], &[75.7, 74.1, 34.1]],
        ),
        (
            Variant::Rk,
            [&[75.6], &[76.4], &[50.1], &[62.7], &[81.5], &[71.6, 45.3], &[82.4, 43.6], &[80.1, 82.5, 42.4]],
        ),
    ];
    rows.iter()
        .map(|(v, vals)| {
            let row = labels
                .iter()
                .zip(vals)
                .map(|(l, x)| (l.clone(), x.to_vec()))
                .collect();
            (*v, row)
        })
        .collect()
}

/// Published long-sequence scores (percent) at lengths 1, 3, 5, 7.
pub fn reference_sequence() -> Vec<(Variant, RefRow)> {
    let rows = [
        (Variant::Base, [72.5, 72.3, 72.6, 73.1]),
        (Variant::Cm, [72.5, 72.1, 71.8, 69.6]),
        (Variant::Rm, [72.5, 74.1, 74.4, 73.8]),
    ];
    rows.iter()
        .map(|(v, xs)| {
            let row = ["L=1", "L=3", "L=5", "L=7"].into_iter().zip(xs).map(|(l, x)| (l.to_string(), vec![*x])).collect();
            (*v, row)
        })
        .collect()
}

/// Fails if any test sample's content hash also occurs in `others`.
pub fn check_disjoint<'a>(test: &[TransitionSample], others: impl IntoIterator<Item = &'a TransitionSample>) -> Result<()> {
    let seen: BTreeSet<[u8; 32]> = others.into_iter().map(TransitionSample::content_hash).collect();
    let count = test.iter().filter(|s| seen.contains(&s.content_hash())).count();
    if count > 0 {
        return Err(Error::DisjointnessViolation { count });
    }
    Ok(())
}

pub fn testset_hash(samples: &[TransitionSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.content_hash());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions<'a> {
    pub top_k: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Training samples to check the test set against.
    pub train: Option<&'a [TransitionSample]>,
}

fn cosines(pred: &BTreeMap<Modality, Embedding>, target: &WorldState, outputs: &BTreeSet<Modality>) -> Result<Vec<f64>> {
    outputs
        .iter()
        .map(|m| {
            let p = pred.get(m).ok_or(Error::UnknownModality(*m))?;
            let t = target.get(*m).ok_or(Error::UnknownModality(*m))?;
            cosine_similarity(p, t)
        })
        .collect()
}

fn push_cells(cells: &mut Vec<Cell>, variant: Variant, task: &str, outputs: &BTreeSet<Modality>, per_sample: &[Vec<f64>]) {
    for (j, m) in outputs.iter().enumerate() {
        let n = per_sample.len();
        let mean = if n == 0 { 0.0 } else { neumaier_sum(per_sample.iter().map(|v| v[j])) / n as f64 };
        cells.push(Cell {
            variant,
            task: task.into(),
            output: *m,
            score: 100.0 * mean,
            count: n,
        });
    }
}

/// Scores every matrix task for each variant over the test samples that carry the task's modalities.
pub fn eval_matrix(
    pred: &dyn Predictor,
    test: &[TransitionSample],
    kbs: &BTreeMap<String, KnowledgeBase>,
    variants: &[Variant],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if let Some(v) = variants.iter().find(|v| v.uses_memory()) {
        return Err(Error::InvalidConfig(format!("variant {v} needs episode history; use sequence evaluation")));
    }
    check_disjoint(test, kbs.values().flat_map(|kb| kb.entries.iter().map(|e| &e.sample)))?;
    if let Some(train) = opts.train {
        check_disjoint(test, train)?;
    }
    let k = opts.top_k.max(1);
    let mut cells = Vec::new();
    for task in matrix_tasks() {
        let label = task.label();
        let usable: Vec<&TransitionSample> = test
            .iter()
            .filter(|s| {
                task.inputs.iter().all(|m| s.state_before.get(*m).is_some())
                    && task.outputs.iter().all(|m| s.state_after.get(*m).is_some())
            })
            .collect();
        for &variant in variants {
            let scores: Vec<Result<Vec<f64>>> = usable
                .par_iter()
                .map(|s| {
                    let inputs: Vec<Modality> = task.inputs.iter().copied().collect();
                    let state = s.state_before.restrict(&inputs)?;
                    let contexts = if variant.uses_knowledge() {
                        match kbs.get(&s.scenario).filter(|kb| !kb.is_empty()) {
                            Some(kb) => kb_retrieve(kb, &state, &s.action, k)?
                                .into_iter()
                                .map(|(hit, _)| ContextSource::from_sample(hit))
                                .collect::<Result<_>>()?,
                            None => Vec::new(),
                        }
                    } else {
                        Vec::new()
                    };
                    let q = Query {
                        sample: s,
                        state,
                        outputs: task.outputs.clone(),
                        variant,
                        contexts,
                    };
                    cosines(&pred.predict(&q)?, &s.state_after, &task.outputs)
                })
                .collect();
            let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
            push_cells(&mut cells, variant, &label, &task.outputs, &scores);
        }
    }
    Ok(EvalReport {
        kind: ReportKind::Matrix,
        seed: opts.seed,
        config_hash: opts.config_hash.clone(),
        testset_hash: testset_hash(test),
        cells,
    })
}

/// Memory entry for step `t` under partial observation, with the predictor's
/// context-free predictions filling the after-state.
pub fn observed_entry(pred: &dyn Predictor, ep: &Episode, t: usize) -> Result<MemoryEntry> {
    let s = &ep.samples[t];
    let state = observe_masked(&s.state_before, &ep.episode_id, s.step_index)?;
    let after = observe_masked(&s.state_after, &ep.episode_id, s.step_index + 1)?;
    let q = Query {
        sample: s,
        state: state.clone(),
        outputs: s.state_after.present().collect(),
        variant: Variant::Base,
        contexts: Vec::new(),
    };
    Ok(MemoryEntry {
        step_index: s.step_index,
        state,
        action: s.action.clone(),
        prediction: Some(pred.predict(&q)?),
        ground_truth: Some(after),
    })
}

/// For each length L, predict transition L from the masked state with the L-1 preceding steps as history.
pub fn eval_sequences(
    pred: &dyn Predictor,
    episodes: &[Episode],
    lengths: &[usize],
    variants: &[Variant],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if let Some(v) = variants.iter().find(|v| v.uses_knowledge()) {
        return Err(Error::InvalidConfig(format!("variant {v} is a knowledge variant")));
    }
    let max_len = lengths.iter().copied().max().ok_or(Error::EmptySet)?;
    if lengths.contains(&0) {
        return Err(Error::InvalidConfig("sequence lengths start at 1".into()));
    }
    if let Some(ep) = episodes.iter().find(|e| e.samples.len() < max_len) {
        return Err(Error::EpisodeTooShort {
            episode: ep.episode_id.clone(),
            len: ep.samples.len(),
            needed: max_len,
        });
    }
    let memories: Vec<Vec<MemoryEntry>> = episodes
        .par_iter()
        .map(|ep| (0..max_len - 1).map(|t| observed_entry(pred, ep, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let outputs: BTreeSet<Modality> = Modality::STATE.into();
    let mut cells = Vec::new();
    let all_samples: Vec<TransitionSample> = episodes.iter().flat_map(|e| e.samples.iter().cloned()).collect();
    for &len in lengths {
        let label = format!("L={len}");
        for &variant in variants {
            let scores: Vec<Result<Vec<f64>>> = episodes
                .par_iter()
                .zip(memories.par_iter())
                .map(|(ep, mem)| {
                    let t = len - 1;
                    let s = &ep.samples[t];
                    let contexts = if variant.uses_memory() {
                        mem[..t].iter().map(MemoryEntry::context_source).collect::<Result<_>>()?
                    } else {
                        Vec::new()
                    };
                    let q = Query {
                        sample: s,
                        state: observe_masked(&s.state_before, &ep.episode_id, s.step_index)?,
                        outputs: outputs.clone(),
                        variant,
                        contexts,
                    };
                    cosines(&pred.predict(&q)?, &s.state_after, &outputs)
                })
                .collect();
            let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
            push_cells(&mut cells, variant, &label, &outputs, &scores);
        }
    }
    Ok(EvalReport {
        kind: ReportKind::Sequence,
        seed: opts.seed,
        config_hash: opts.config_hash.clone(),
        testset_hash: testset_hash(&all_samples),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::cognition::kb_build_per_scenario;
    use crate::synthworld::{gen_world, generate, DatasetConfig, WorldConfig};

    fn world() -> (WorldSpec, crate::synthworld::Dataset) {
        let w = gen_world(3, &WorldConfig { latent_dim: 6, d_enc: 12, n_actions: 8, n_scenarios: 2, ..WorldConfig::default() }).unwrap();
        let ds = generate(&w, &DatasetConfig { seed: 4, n_episodes: 80, ..DatasetConfig::default() }).unwrap();
        (w, ds)
    }

    #[test]
    fn eight_tasks_in_order() {
        let labels: Vec<String> = matrix_tasks().iter().map(EvalTask::label).collect();
        assert_eq!(labels.len(), 8);
        assert_eq!(labels[0], "image->image");
        assert_eq!(labels[3], "image&audio->video");
        assert_eq!(labels[7], "image&video&audio->image&video&audio");
    }

    #[test]
    fn oracle_scores_full_marks() {
        let (w, ds) = world();
        let view = ds.split_view();
        let kbs = kb_build_per_scenario(&view.kb.values().flatten().cloned().collect::<Vec<_>>()).unwrap();
        let p = OraclePredictor::new(&w, &ds.sidecar);
        let opts = EvalOptions { top_k: 1, train: Some(&view.train), ..EvalOptions::default() };
        let r = eval_matrix(&p, &view.test, &kbs, &[Variant::Base, Variant::Ck, Variant::Rk], &opts).unwrap();
        assert_eq!(r.tasks().len(), 8);
        assert_eq!(r.cells.len(), 3 * (1 + 1 + 1 + 1 + 1 + 2 + 2 + 3));
        for c in &r.cells {
            assert_eq!(format!("{:.1}", c.score), "100.0", "{c:?}");
            assert!((c.score - 100.0).abs() < 1e-9);
        }
        let md = r.to_markdown(false);
        assert!(md.contains("100.0/100.0/100.0"));
        let seq = eval_sequences(&p, &ds.episodes(), &[1, 3, 5, 7], &[Variant::Base, Variant::Cm, Variant::Rm], &opts).unwrap();
        assert!(seq.cells.iter().all(|c| (c.score - 100.0).abs() < 1e-9));
    }

    #[test]
    fn random_predictor_near_zero() {
        let (w, ds) = world();
        let view = ds.split_view();
        let p = RandomPredictor { seed: 9, dim: w.d_enc };
        let r = eval_matrix(&p, &view.test, &BTreeMap::new(), &[Variant::Base], &EvalOptions::default()).unwrap();
        for c in &r.cells {
            assert!(c.score.abs() < 5.0 * 100.0 / (w.d_enc as f64 * c.count as f64).sqrt() + 1e-9, "{c:?}");
        }
    }

    #[test]
    fn variants_reduce_to_base_without_context() {
        let (w, ds) = world();
        let view = ds.split_view();
        let m = WorldModel::new(ModelConfig { d_model: 8, n_heads: 2, d_enc: w.d_enc, k_sig: 2, ..ModelConfig::default() }).unwrap();
        let p = ModelPredictor(&m);
        let test = &view.test[..6];
        let r = eval_matrix(&p, test, &BTreeMap::new(), &[Variant::Base, Variant::Ck, Variant::Rk], &EvalOptions::default()).unwrap();
        for t in r.tasks() {
            for c in r.cells.iter().filter(|c| c.task == t && c.variant == Variant::Base) {
                for v in [Variant::Ck, Variant::Rk] {
                    assert_eq!(r.cell(v, &t, c.output).unwrap().score.to_bits(), c.score.to_bits());
                }
            }
        }
        let eps: Vec<Episode> = ds.episodes().into_iter().take(5).collect();
        let s = eval_sequences(&p, &eps, &[1, 3], &[Variant::Base, Variant::Cm, Variant::Rm], &EvalOptions::default()).unwrap();
        for m in Modality::STATE {
            let b = s.cell(Variant::Base, "L=1", m).unwrap().score;
            assert_eq!(s.cell(Variant::Cm, "L=1", m).unwrap().score.to_bits(), b.to_bits());
            assert_eq!(s.cell(Variant::Rm, "L=1", m).unwrap().score.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn overlap_is_rejected() {
        let (_, ds) = world();
        let view = ds.split_view();
        let mut kb_samples: Vec<TransitionSample> = view.kb.values().flatten().cloned().collect();
        kb_samples.push(view.test[0].clone());
        let kbs = kb_build_per_scenario(&kb_samples).unwrap();
        let p = RandomPredictor { seed: 0, dim: 4 };
        let err = eval_matrix(&p, &view.test, &kbs, &[Variant::Base], &EvalOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DisjointnessViolation { count: 1 }));
    }

    #[test]
    fn short_episodes_rejected() {
        let (_, ds) = world();
        let mut ep = ds.episodes().remove(0);
        ep.samples.truncate(3);
        let p = RandomPredictor { seed: 0, dim: 4 };
        assert!(matches!(
            eval_sequences(&p, &[ep], &[1, 5], &[Variant::Base], &EvalOptions::default()),
            Err(Error::EpisodeTooShort { len: 3, needed: 5, .. })
        ));
    }

    #[test]
    fn report_round_trips_and_layout() {
        let (w, ds) = world();
        let view = ds.split_view();
        let p = RandomPredictor { seed: 1, dim: w.d_enc };
        let opts = EvalOptions { config_hash: "abc123".into(), seed: 5, ..EvalOptions::default() };
        let r = eval_matrix(&p, &view.test, &BTreeMap::new(), &[Variant::Base, Variant::Rk], &opts).unwrap();
        let back = EvalReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r);
        let json: EvalReport = serde_json::from_slice(&r.to_json().unwrap()).unwrap();
        assert_eq!(json, r);
        let md = r.to_markdown(true);
        let header = md.lines().find(|l| l.starts_with("| Input Modality")).unwrap();
        assert_eq!(header.matches('|').count(), 10);
        assert_eq!(md.lines().filter(|l| l.starts_with("| base ") || l.starts_with("| RK ")).count(), 4);
        assert!(md.contains("75.6") && md.contains("71.6"));
        for text in [md.clone(), r.to_csv(), String::from_utf8(r.to_json().unwrap()).unwrap()] {
            assert!(text.contains("abc123"));
        }
    }

    #[test]
    fn compensated_sum() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(neumaier_sum(xs), 2.0);
        assert_eq!(neumaier_sum([0.1; 10]), 1.0);
    }
}
