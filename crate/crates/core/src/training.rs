//! Losses, the optimizer, progressive pretraining, cognitive-augmented tuning
//! and finite-difference gradient checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cognition::{KnowledgeBase, MemoryEntry};
use crate::curriculum::{allowed_classes, realizable_pairs, sample_task, CompositionClass, CurriculumSchedule, TaskSpec};
use crate::decoder::TargetSpace;
use crate::error::{Error, Result};
use crate::model::{ContextInput, ContextMode, WorldModel};
use crate::params::{Component, ParamId, ParamStore};
use crate::reflector::ContextSource;
use crate::synthworld::Episode;
use crate::tensor::{BackwardFault, Graph, Matrix, Var};
use crate::types::{cosine_similarity, ActionDesc, Embedding, Modality, TransitionSample, WorldState};

/// Reference batch sizes and epoch counts of the full-scale setup. Desk defaults are far smaller.
pub const REFERENCE_PRETRAIN_BATCH: usize = 256;
pub const REFERENCE_PRETRAIN_EPOCHS: usize = 16;
pub const REFERENCE_TUNE_BATCH: usize = 128;
pub const REFERENCE_TUNE_EPOCHS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    OneMinusCosine,
    Mse,
}

pub fn transition_loss(pred: &Embedding, target: &Embedding, kind: LossKind) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::dim("transition loss", target.dim(), pred.dim()));
    }
    match kind {
        LossKind::OneMinusCosine => Ok(1.0 - cosine_similarity(pred, target)?),
        LossKind::Mse => Ok(pred.0.iter().zip(&target.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.dim() as f64),
    }
}

fn loss_node(g: &mut Graph, pred: Var, target: &Embedding, kind: LossKind) -> Var {
    let t = g.constant(Matrix::row_vector(target.0.clone()));
    match kind {
        LossKind::OneMinusCosine => g.cosine_loss(pred, t),
        LossKind::Mse => g.mse(pred, t),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Curriculum,
    /// Every class from the first step.
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Cosine decay to `lr * min_lr_ratio` over the run.
    pub cosine_decay: bool,
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            cosine_decay: true,
            min_lr_ratio: 0.1,
            warmup_steps: 20,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = if self.warmup_steps > 0 && step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decay = if self.cosine_decay && total > 1 {
            let t = step as f64 / (total - 1) as f64;
            self.min_lr_ratio + (1.0 - self.min_lr_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Adam {
            cfg,
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: 0,
        }
    }

    /// One update of every parameter that has a gradient. Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [Option<Matrix>], lr: f64) -> f64 {
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for (i, (id, g)) in ids.into_iter().zip(grads.iter_mut()).enumerate() {
            let Some(g) = g.as_mut() else { continue };
            let m = self.m[i].get_or_insert_with(|| Matrix::zeros(g.rows, g.cols));
            let v = self.v[i].get_or_insert_with(|| Matrix::zeros(g.rows, g.cols));
            let p = store.value_mut(id);
            for k in 0..g.data.len() {
                let gk = g.data[k] * clip;
                m.data[k] = b1 * m.data[k] + (1.0 - b1) * gk;
                v.data[k] = b2 * v.data[k] + (1.0 - b2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                p.data[k] -= lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
        norm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub optimizer: AdamConfig,
    pub schedule: ScheduleKind,
    pub stage_length: usize,
    pub class_order: Vec<CompositionClass>,
    pub loss: LossKind,
    /// Weight of the render-space loss next to the unified-space loss.
    pub render_weight: f64,
    pub seed: u64,
    /// Components held fixed; the context lift is always fixed.
    pub freeze: Vec<Component>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 16,
            steps_per_epoch: 80,
            optimizer: AdamConfig::default(),
            schedule: ScheduleKind::Curriculum,
            stage_length: 4,
            class_order: CompositionClass::ALL.to_vec(),
            loss: LossKind::OneMinusCosine,
            render_weight: 0.0,
            seed: 0,
            freeze: vec![Component::Reflector],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::InvalidConfig("batch_size, epochs and steps_per_epoch must be >= 1".into()));
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr < 0.0 || self.render_weight.is_nan() || self.render_weight < 0.0 {
            return Err(Error::InvalidConfig("learning rate and render weight must be non-negative".into()));
        }
        self.curriculum().validate()
    }

    pub fn curriculum(&self) -> CurriculumSchedule {
        CurriculumSchedule {
            stage_length: self.stage_length,
            classes: self.class_order.clone(),
            total_epochs: self.epochs,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn allowed(&self, epoch: usize) -> Result<BTreeSet<CompositionClass>> {
        match self.schedule {
            ScheduleKind::Curriculum => allowed_classes(&self.curriculum(), epoch),
            ScheduleKind::Naive => {
                if epoch == 0 || epoch > self.epochs {
                    return Err(Error::EpochOutOfRange { epoch, total: self.epochs });
                }
                Ok(self.class_order.iter().copied().collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub class: CompositionClass,
    pub loss: f64,
}

/// Per-step, per-class batch losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub records: Vec<LossRecord>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,class,loss\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{:.16e}", r.step, r.epoch, r.class, r.loss);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Data(format!("loss curve line {}: {line}", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            records.push(LossRecord {
                step: f[0].parse().map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                class: CompositionClass::parse(f[2])?,
                loss: f[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(LossCurve { records })
    }

    /// Mean loss of `class` over its last `n` records.
    pub fn tail_mean(&self, class: CompositionClass, n: usize) -> Option<f64> {
        let v: Vec<f64> = self.records.iter().filter(|r| r.class == class).map(|r| r.loss).collect();
        if v.is_empty() {
            return None;
        }
        let tail = &v[v.len().saturating_sub(n)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }

    /// Every record's class was allowed at its epoch, and steps never decrease.
    pub fn check_legal(&self, cfg: &TrainConfig) -> Result<()> {
        let mut last = 0;
        for r in &self.records {
            if r.step < last {
                return Err(Error::Data(format!("step {} after {last}", r.step)));
            }
            last = r.step;
            if !cfg.allowed(r.epoch)?.contains(&r.class) {
                return Err(Error::Data(format!("class {} at epoch {} is outside the schedule", r.class, r.epoch)));
            }
        }
        Ok(())
    }
}

/// One training example: query, optional contexts, requested outputs and targets.
#[derive(Debug, Clone)]
pub struct Example {
    pub state: WorldState,
    pub action: ActionDesc,
    pub contexts: Vec<ContextSource>,
    pub mode: ContextMode,
    pub targets: BTreeMap<Modality, Embedding>,
    pub class: CompositionClass,
}

impl Example {
    pub fn from_task(sample: &TransitionSample, task: &TaskSpec) -> Result<Self> {
        let inputs: Vec<Modality> = task.inputs.iter().copied().collect();
        let targets = task
            .outputs
            .iter()
            .map(|m| {
                sample
                    .state_after
                    .get(*m)
                    .cloned()
                    .map(|e| (*m, e))
                    .ok_or_else(|| Error::NoRealizableTask { sample: sample.id() })
            })
            .collect::<Result<_>>()?;
        Ok(Example {
            state: sample.state_before.restrict(&inputs)?,
            action: sample.action.clone(),
            contexts: Vec::new(),
            mode: ContextMode::Reflected,
            targets,
            class: task.class,
        })
    }

    pub fn outputs(&self) -> BTreeSet<Modality> {
        self.targets.keys().copied().collect()
    }
}

/// Loss graph of one example: mean unified loss over outputs plus the weighted render loss.
pub fn example_loss(
    model: &WorldModel,
    g: &mut Graph,
    ex: &Example,
    kind: LossKind,
    render_weight: f64,
) -> Result<Var> {
    let spaces: &[TargetSpace] = if render_weight > 0.0 {
        &[TargetSpace::Unified, TargetSpace::Render]
    } else {
        &[TargetSpace::Unified]
    };
    let ctx = ContextInput::new(ex.mode, &ex.contexts);
    let outs = model.outputs_graph(g, &ex.state, &ex.action, Some(&ctx), &ex.outputs(), spaces)?;
    let n = ex.targets.len() as f64;
    let mut terms = Vec::with_capacity(outs.len());
    for ((space, m), v) in outs {
        let target = &ex.targets[&m];
        match space {
            TargetSpace::Unified => {
                let l = loss_node(g, v, target, kind);
                terms.push((l, 1.0 / n));
            }
            TargetSpace::Render => {
                let t = model.render.apply(target)?;
                let l = loss_node(g, v, &t, kind);
                terms.push((l, render_weight / n));
            }
        }
    }
    Ok(g.weighted_sum(&terms))
}

struct StepResult {
    loss: f64,
    grads: Vec<Option<Matrix>>,
}

fn run_example(model: &WorldModel, ex: &Example, weight: f64, kind: LossKind, render_weight: f64) -> Result<StepResult> {
    let track = |id: ParamId| model.is_trainable(id);
    let mut g = Graph::with_tracking(&model.store, &track);
    let l = example_loss(model, &mut g, ex, kind, render_weight)?;
    let loss = g.scalar(l);
    let scaled = g.scale(l, weight);
    let grads = g.backward(scaled).params;
    Ok(StepResult { loss, grads })
}

/// Per-class averaging: each class present in the batch gets equal weight.
fn class_weights(batch: &[Example]) -> Vec<f64> {
    let mut counts: BTreeMap<CompositionClass, usize> = BTreeMap::new();
    for ex in batch {
        *counts.entry(ex.class).or_default() += 1;
    }
    let nc = counts.len() as f64;
    batch.iter().map(|ex| 1.0 / (nc * counts[&ex.class] as f64)).collect()
}

/// Forward, backward and optimizer step on one batch. Returns mean loss per class.
fn train_batch(
    model: &mut WorldModel,
    opt: &mut Adam,
    batch: &[Example],
    kind: LossKind,
    render_weight: f64,
    lr: f64,
    step: usize,
) -> Result<BTreeMap<CompositionClass, f64>> {
    let weights = class_weights(batch);
    let results: Vec<Result<StepResult>> = {
        let m: &WorldModel = model;
        batch
            .par_iter()
            .zip(weights.par_iter())
            .map(|(ex, w)| run_example(m, ex, *w, kind, render_weight))
            .collect()
    };
    let mut total: Vec<Option<Matrix>> = vec![None; model.store.len()];
    let mut per_class: BTreeMap<CompositionClass, (f64, usize)> = BTreeMap::new();
    for (ex, r) in batch.iter().zip(results) {
        let r = r?;
        if !r.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("class {} outputs {:?}", ex.class, ex.outputs()),
            });
        }
        let e = per_class.entry(ex.class).or_default();
        e.0 += r.loss;
        e.1 += 1;
        for (acc, g) in total.iter_mut().zip(r.grads) {
            if let Some(g) = g {
                match acc {
                    Some(a) => a.add_assign(&g),
                    None => *acc = Some(g),
                }
            }
        }
    }
    for (id, g) in model.store.ids().zip(total.iter_mut()) {
        if !model.is_trainable(id) {
            *g = None;
        }
    }
    opt.step(&mut model.store, &mut total, lr);
    Ok(per_class.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect())
}

fn apply_freeze(model: &mut WorldModel, frozen: &[Component]) {
    for c in Component::ALL {
        model.freeze.set(c, frozen.contains(&c));
    }
}

/// Progressive pretraining without context tokens.
pub fn pretrain(model: &mut WorldModel, data: &[TransitionSample], cfg: &TrainConfig) -> Result<LossCurve> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptySet);
    }
    apply_freeze(model, &cfg.freeze);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.optimizer.clone(), model.store.len());
    let mut curve = LossCurve::default();
    let total = cfg.total_steps();
    for step in 0..total {
        let epoch = step / cfg.steps_per_epoch + 1;
        let allowed = cfg.allowed(epoch)?;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = data.choose(&mut rng).expect("non-empty");
            let task = sample_task(s, &allowed, &mut rng)?;
            batch.push(Example::from_task(s, &task)?);
        }
        let lr = cfg.optimizer.lr_at(step, total);
        let losses = train_batch(model, &mut opt, &batch, cfg.loss, cfg.render_weight, lr, step)?;
        curve
            .records
            .extend(losses.into_iter().map(|(class, loss)| LossRecord { step, epoch, class, loss }));
    }
    Ok(curve)
}

/// Mean loss of a class over every realizable task of every probe sample.
pub fn probe_class_loss(
    model: &WorldModel,
    samples: &[TransitionSample],
    class: CompositionClass,
    kind: LossKind,
) -> Result<f64> {
    let mut items = Vec::new();
    for s in samples {
        let before: Vec<Modality> = s.state_before.present().collect();
        let after: Vec<Modality> = s.state_after.present().collect();
        for t in realizable_pairs(&before, &after).into_iter().filter(|t| t.class == class) {
            items.push(Example::from_task(s, &t)?);
        }
    }
    if items.is_empty() {
        return Err(Error::EmptySet);
    }
    let losses: Vec<Result<f64>> = items
        .par_iter()
        .map(|ex| {
            let pred = model.predict(&ex.state, &ex.action, None, &ex.outputs())?;
            let mut l = 0.0;
            for (m, p) in &pred {
                l += transition_loss(p, &ex.targets[m], kind)?;
            }
            Ok(l / pred.len() as f64)
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / items.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: AdamConfig,
    pub loss: LossKind,
    pub seed: u64,
    pub top_k: usize,
    pub history_min: usize,
    pub history_max: usize,
    /// Share of each batch built with retrieved knowledge; the rest uses memory.
    pub knowledge_fraction: f64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            batch_size: 16,
            steps: 800,
            optimizer: AdamConfig::default(),
            loss: LossKind::OneMinusCosine,
            seed: 0,
            top_k: 1,
            history_min: 2,
            history_max: 5,
            knowledge_fraction: 0.5,
        }
    }
}

/// The modality hidden at a given step of a partially observed episode.
pub fn masked_modality(episode_id: &str, step: u64, available: &[Modality]) -> Modality {
    let h = episode_id.bytes().fold(0u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
    available[((h + step) % available.len() as u64) as usize]
}

/// `state` without the modality masked at `step`; unchanged if only one modality is present.
pub fn observe_masked(state: &WorldState, episode_id: &str, step: u64) -> Result<WorldState> {
    let present: Vec<Modality> = state.present().collect();
    if present.len() < 2 {
        return Ok(state.clone());
    }
    let hidden = masked_modality(episode_id, step, &Modality::STATE);
    let keep: Vec<Modality> = present.into_iter().filter(|m| *m != hidden).collect();
    state.restrict(&keep)
}

/// Memory entry for step `t` of an episode under partial observation: the
/// observed before-state, the action, the observed after-state, and the
/// base model's predictions for every state modality.
pub fn memory_entry(model: &WorldModel, ep: &Episode, t: usize) -> Result<MemoryEntry> {
    let s = &ep.samples[t];
    let state = observe_masked(&s.state_before, &ep.episode_id, s.step_index)?;
    let after = observe_masked(&s.state_after, &ep.episode_id, s.step_index + 1)?;
    let outs: BTreeSet<Modality> = s.state_after.present().collect();
    let prediction = model.predict(&state, &s.action, None, &outs)?;
    Ok(MemoryEntry {
        step_index: s.step_index,
        state,
        action: s.action.clone(),
        prediction: Some(prediction),
        ground_truth: Some(after),
    })
}

/// Query for step `t` with `h` history entries from the memory list.
pub fn memory_example(ep: &Episode, memory: &[MemoryEntry], t: usize, h: usize) -> Result<Example> {
    let s = &ep.samples[t];
    let state = observe_masked(&s.state_before, &ep.episode_id, s.step_index)?;
    let contexts = memory[t - h..t].iter().map(MemoryEntry::context_source).collect::<Result<_>>()?;
    let inputs: BTreeSet<Modality> = state.present().collect();
    let targets: BTreeMap<Modality, Embedding> = s.state_after.modalities().clone();
    let outputs: BTreeSet<Modality> = targets.keys().copied().collect();
    Ok(Example {
        class: crate::curriculum::classify_composition(&inputs, &outputs)?,
        state,
        action: s.action.clone(),
        contexts,
        mode: ContextMode::Reflected,
        targets,
    })
}

/// Reflector-only training on knowledge- and memory-augmented examples.
/// Every other component is checked bit-identical afterwards.
pub fn cognitive_tune(
    model: &mut WorldModel,
    samples: &[TransitionSample],
    episodes: &[Episode],
    kbs: &BTreeMap<String, KnowledgeBase>,
    cfg: &TuneConfig,
) -> Result<LossCurve> {
    if cfg.batch_size == 0 || cfg.top_k == 0 || cfg.history_min == 0 || cfg.history_min > cfg.history_max {
        return Err(Error::InvalidConfig("invalid tuning sizes".into()));
    }
    let n_know = if episodes.is_empty() {
        cfg.batch_size
    } else if samples.is_empty() {
        0
    } else {
        ((cfg.batch_size as f64) * cfg.knowledge_fraction).round() as usize
    };
    if n_know > 0 && (kbs.is_empty() || kbs.values().all(KnowledgeBase::is_empty)) {
        return Err(Error::EmptyKnowledgeBase);
    }
    let long: Vec<&Episode> = episodes.iter().filter(|e| e.samples.len() > cfg.history_min).collect();
    if n_know < cfg.batch_size && long.is_empty() {
        return Err(Error::EpisodeTooShort {
            episode: episodes.first().map(|e| e.episode_id.clone()).unwrap_or_default(),
            len: episodes.first().map_or(0, |e| e.samples.len()),
            needed: cfg.history_min + 1,
        });
    }
    apply_freeze(model, &Component::ALL.iter().copied().filter(|c| *c != Component::Reflector).collect::<Vec<_>>());
    let before = model.checksums();

    // base predictions never change while the backbone is frozen
    let memories: Vec<Vec<MemoryEntry>> = {
        let m: &WorldModel = model;
        long.par_iter()
            .map(|ep| (0..ep.samples.len()).map(|t| memory_entry(m, ep, t)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?
    };

    let all: BTreeSet<CompositionClass> = CompositionClass::ALL.into();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.optimizer.clone(), model.store.len());
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..n_know {
            let s = samples.choose(&mut rng).expect("non-empty");
            let task = sample_task(s, &all, &mut rng)?;
            let mut ex = Example::from_task(s, &task)?;
            let kb = kbs.get(&s.scenario).ok_or(Error::EmptyKnowledgeBase)?;
            ex.contexts = crate::cognition::kb_retrieve(kb, &ex.state, &ex.action, cfg.top_k)?
                .into_iter()
                .map(|(hit, _)| ContextSource::from_sample(hit))
                .collect::<Result<_>>()?;
            batch.push(ex);
        }
        for _ in n_know..cfg.batch_size {
            let i = rng.random_range(0..long.len());
            let ep = long[i];
            let h = rng.random_range(cfg.history_min..=cfg.history_max).min(ep.samples.len() - 1);
            let t = rng.random_range(h..ep.samples.len());
            batch.push(memory_example(ep, &memories[i], t, h)?);
        }
        let lr = cfg.optimizer.lr_at(step, cfg.steps);
        let losses = train_batch(model, &mut opt, &batch, cfg.loss, 0.0, lr, step)?;
        curve
            .records
            .extend(losses.into_iter().map(|(class, loss)| LossRecord { step, epoch: 1, class, loss }));
    }
    let after = model.checksums();
    for c in Component::ALL.iter().filter(|c| **c != Component::Reflector) {
        if before[c] != after[c] {
            return Err(Error::Checkpoint(format!("{c} changed during reflector tuning")));
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GroupCheck {
    Checked {
        max_rel_err: f64,
        worst_param: String,
        worst_index: usize,
        analytic: f64,
        numeric: f64,
        entries: usize,
    },
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub groups: BTreeMap<Component, GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .values()
            .filter_map(|g| match g {
                GroupCheck::Checked { max_rel_err, .. } => Some(*max_rel_err),
                GroupCheck::Skipped => None,
            })
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(Component, &GroupCheck)> {
        self.groups
            .iter()
            .filter(|(_, g)| matches!(g, GroupCheck::Checked { .. }))
            .max_by(|a, b| {
                let e = |g: &GroupCheck| match g {
                    GroupCheck::Checked { max_rel_err, .. } => *max_rel_err,
                    GroupCheck::Skipped => 0.0,
                };
                e(a.1).total_cmp(&e(b.1))
            })
            .map(|(c, g)| (*c, g))
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Entries sampled per parameter tensor; 0 checks every entry.
    pub entries_per_param: usize,
    pub render_weight: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-4,
            entries_per_param: 6,
            render_weight: 1.0,
            loss: LossKind::OneMinusCosine,
            seed: 0,
            fault: None,
        }
    }
}

fn total_loss(model: &WorldModel, store: &ParamStore, probe: &[Example], cfg: &GradCheckConfig) -> Result<f64> {
    let none = |_| false;
    let mut sum = 0.0;
    for ex in probe {
        let mut g = Graph::with_tracking(store, &none);
        let l = example_loss(model, &mut g, ex, cfg.loss, cfg.render_weight)?;
        sum += g.scalar(l);
    }
    Ok(sum)
}

/// Analytic gradients of the summed probe loss against central differences.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(model: &WorldModel, probe: &[Example], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let track = |id: ParamId| model.is_trainable(id);
    let mut analytic: Vec<Option<Matrix>> = vec![None; model.store.len()];
    for ex in probe {
        let mut g = Graph::with_tracking(&model.store, &track);
        g.set_fault(cfg.fault);
        let l = example_loss(model, &mut g, ex, cfg.loss, cfg.render_weight)?;
        for (acc, gr) in analytic.iter_mut().zip(g.backward(l).params) {
            if let Some(gr) = gr {
                match acc {
                    Some(a) => a.add_assign(&gr),
                    None => *acc = Some(gr),
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut groups: BTreeMap<Component, GroupCheck> = BTreeMap::new();
    let mut store = model.store.clone();
    for c in Component::ALL {
        if model.freeze.is_frozen(c) {
            groups.insert(c, GroupCheck::Skipped);
        }
    }
    for (id, p) in model.store.iter() {
        if model.freeze.is_frozen(p.component) {
            continue;
        }
        let n = p.value.data.len();
        let idx: Vec<usize> = if cfg.entries_per_param == 0 || cfg.entries_per_param >= n {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, cfg.entries_per_param).into_vec()
        };
        for k in idx {
            let orig = store.value(id).data[k];
            store.value_mut(id).data[k] = orig + cfg.h;
            let lp = total_loss(model, &store, probe, cfg)?;
            store.value_mut(id).data[k] = orig - cfg.h;
            let lm = total_loss(model, &store, probe, cfg)?;
            store.value_mut(id).data[k] = orig;
            let num = (lp - lm) / (2.0 * cfg.h);
            let an = analytic[id.index()].as_ref().map_or(0.0, |g| g.data[k]);
            let rel = (an - num).abs() / an.abs().max(num.abs()).max(1e-6);
            let entry = groups.entry(p.component).or_insert(GroupCheck::Checked {
                max_rel_err: -1.0,
                worst_param: String::new(),
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
                entries: 0,
            });
            if let GroupCheck::Checked {
                max_rel_err,
                worst_param,
                worst_index,
                analytic,
                numeric,
                entries,
            } = entry
            {
                *entries += 1;
                if rel > *max_rel_err {
                    *max_rel_err = rel;
                    *worst_param = p.name.clone();
                    *worst_index = k;
                    *analytic = an;
                    *numeric = num;
                }
            }
        }
    }
    Ok(GradCheckReport { h: cfg.h, groups })
}

/// Probe examples that reach every trainable group: plain tasks plus reflected-context tasks.
pub fn grad_probe(samples: &[TransitionSample], n: usize, seed: u64) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: BTreeSet<CompositionClass> = CompositionClass::ALL.into();
    let mut out = Vec::new();
    for (i, s) in samples.iter().take(n).enumerate() {
        let task = sample_task(s, &all, &mut rng)?;
        let mut ex = Example::from_task(s, &task)?;
        if i % 2 == 1 {
            let other = &samples[(i + 1) % samples.len()];
            ex.contexts = vec![ContextSource::from_sample(other)?];
        }
        out.push(ex);
    }
    Ok(out)
}
