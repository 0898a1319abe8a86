//! End-to-end reproduction suite: the ten acceptance checks on a pinned
//! synthetic world, with trained models shared between checks.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::cognition::{kb_build, kb_build_per_scenario, kb_retrieve, KnowledgeBase};
use crate::config::RunConfig;
use crate::curriculum::CompositionClass;
use crate::decoder::fit_agent_projector;
use crate::error::{Error, Result};
use crate::evalbench::{eval_matrix, eval_sequences, matrix_tasks, EvalOptions, EvalReport, ModelPredictor, OraclePredictor, Variant};
use crate::io::{read_to_string, write_atomic};
use crate::model::WorldModel;
use crate::params::Component;
use crate::synthesis::{
    filter_and_add, rollout_agreement, rouge_l, seed_pool, synthesize, Admission, Completer, InstructionRecord, MockGrammar,
    MockProvider, Origin, PlanPattern, Pool, Provenance, ROUGE_THRESHOLD,
};
use crate::synthworld::{gen_world, generate, group_episodes, Dataset, DatasetConfig, Episode, SplitView, WorldSpec};
use crate::training::{cognitive_tune, grad_check, grad_probe, pretrain, GradCheckConfig, GroupCheck, LossCurve, ScheduleKind, TrainConfig};
use crate::types::{cosine_similarity, encode_query, Embedding, TransitionSample};

pub const WORLD_SEED: u64 = 7;
pub const DATA_SEED: u64 = 1;
pub const CONVERGENCE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const KNOWLEDGE_SEEDS: [u64; 3] = [0, 1, 2];
/// Curve records averaged for the final loss.
pub const TAIL: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: usize,
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget_seconds: Option<f64>,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        let budget = self.budget_seconds.map_or(String::new(), |b| format!(" / {b:.0}s"));
        format!(
            "[{}] c{:02} {}: {} ({:.1}s{budget})",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproSummary {
    pub config_hash: String,
    pub criteria: Vec<CriterionResult>,
    pub all_pass: bool,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

struct Tuned {
    model: WorldModel,
    before: BTreeMap<Component, String>,
    matrix: Option<EvalReport>,
    /// Seconds spent tuning (or loading) this model.
    seconds: f64,
}

pub struct Suite {
    pub cfg: RunConfig,
    pub world: WorldSpec,
    pub data: Dataset,
    pub view: SplitView,
    pub kbs: BTreeMap<String, KnowledgeBase>,
    /// Checkpoints and curves are cached here when set, so reruns skip training.
    pub cache: Option<PathBuf>,
    pretrained: BTreeMap<(ScheduleKind, u64), (WorldModel, LossCurve)>,
    tuned: BTreeMap<u64, Tuned>,
    integrity: Vec<String>,
}

fn sched_name(s: ScheduleKind) -> &'static str {
    match s {
        ScheduleKind::Curriculum => "curriculum",
        ScheduleKind::Naive => "naive",
    }
}

impl Suite {
    pub fn new(cfg: RunConfig, cache: Option<PathBuf>) -> Result<Self> {
        let world = gen_world(WORLD_SEED, &cfg.world)?;
        let data = generate(&world, &DatasetConfig { seed: DATA_SEED, ..cfg.data.clone() })?;
        let view = data.split_view();
        let kbs = kb_build_per_scenario(&view.kb.values().flatten().cloned().collect::<Vec<_>>())?;
        if let Some(d) = &cache {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(Suite {
            cfg,
            world,
            data,
            view,
            kbs,
            cache,
            pretrained: BTreeMap::new(),
            tuned: BTreeMap::new(),
            integrity: Vec::new(),
        })
    }

    fn cache_path(&self, name: &str) -> Option<PathBuf> {
        self.cache.as_ref().map(|d| d.join(name))
    }

    fn train_config(&self, schedule: ScheduleKind, seed: u64) -> TrainConfig {
        TrainConfig { schedule, seed, ..self.cfg.train.clone() }
    }

    /// Pretrain (or load) the model for `(schedule, seed)`; returns whether it was trained now.
    fn ensure_pretrained(&mut self, schedule: ScheduleKind, seed: u64) -> Result<bool> {
        let key = (schedule, seed);
        if self.pretrained.contains_key(&key) {
            return Ok(false);
        }
        let stem = format!("pretrain-{}-{seed}", sched_name(schedule));
        let ckpt = self.cache_path(&format!("{stem}.ckpt.json"));
        let csv = self.cache_path(&format!("{stem}.loss.csv"));
        if let (Some(c), Some(l)) = (&ckpt, &csv) {
            if c.exists() && l.exists() {
                match load_checkpoint(c) {
                    Ok((m, _)) => {
                        let curve = LossCurve::from_csv(&read_to_string(l)?)?;
                        self.pretrained.insert(key, (m, curve));
                        return Ok(false);
                    }
                    Err(e @ Error::Checkpoint(_)) => self.integrity.push(format!("{}: {e}", c.display())),
                    Err(e) => return Err(e),
                }
            }
        }
        let mut m = WorldModel::new(ModelConfig { seed, ..self.cfg.model.clone() })?;
        let pool = self.world.non_esoteric(&self.view.train);
        let curve = pretrain(&mut m, &pool, &self.train_config(schedule, seed))?;
        if let (Some(c), Some(l)) = (&ckpt, &csv) {
            save_checkpoint(&m, None, c)?;
            write_atomic(l, curve.to_csv().as_bytes())?;
        }
        self.pretrained.insert(key, (m, curve));
        Ok(true)
    }

    fn ensure_tuned(&mut self, seed: u64) -> Result<()> {
        if self.tuned.contains_key(&seed) {
            return Ok(());
        }
        let t = Instant::now();
        self.ensure_pretrained(ScheduleKind::Curriculum, seed)?;
        let base = &self.pretrained[&(ScheduleKind::Curriculum, seed)].0;
        let before = base.checksums();
        let path = self.cache_path(&format!("tuned-{seed}.ckpt.json"));
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            match load_checkpoint(p) {
                Ok((model, _)) => {
                    let seconds = t.elapsed().as_secs_f64();
                    self.tuned.insert(seed, Tuned { model, before, matrix: None, seconds });
                    return Ok(());
                }
                Err(e @ Error::Checkpoint(_)) => self.integrity.push(format!("{}: {e}", p.display())),
                Err(e) => return Err(e),
            }
        }
        let mut model = base.clone();
        let eps = group_episodes(&self.view.train);
        cognitive_tune(&mut model, &self.view.train, &eps, &self.kbs, &crate::training::TuneConfig { seed, ..self.cfg.tune.clone() })?;
        if let Some(p) = &path {
            save_checkpoint(&model, None, p)?;
        }
        let seconds = t.elapsed().as_secs_f64();
        self.tuned.insert(seed, Tuned { model, before, matrix: None, seconds });
        Ok(())
    }

    fn tune_seconds(&self, seeds: &[u64]) -> f64 {
        seeds.iter().map(|s| self.tuned[s].seconds).sum()
    }

    fn tuned_matrix(&mut self, seed: u64) -> Result<&EvalReport> {
        self.ensure_tuned(seed)?;
        if self.tuned[&seed].matrix.is_none() {
            let opts = EvalOptions {
                top_k: self.cfg.cognition.top_k,
                seed,
                config_hash: self.cfg.hash()?,
                train: Some(&self.view.train),
            };
            let r = eval_matrix(
                &ModelPredictor(&self.tuned[&seed].model),
                &self.view.test,
                &self.kbs,
                &[Variant::Base, Variant::Ck, Variant::Rk],
                &opts,
            )?;
            self.tuned.get_mut(&seed).expect("tuned above").matrix = Some(r);
        }
        Ok(self.tuned[&seed].matrix.as_ref().expect("set above"))
    }

    pub fn c01_curriculum(&mut self) -> Result<CriterionResult> {
        let t = Instant::now();
        let mut fresh = true;
        let mut finals: BTreeMap<ScheduleKind, Vec<f64>> = BTreeMap::new();
        for seed in CONVERGENCE_SEEDS {
            for s in [ScheduleKind::Curriculum, ScheduleKind::Naive] {
                fresh &= self.ensure_pretrained(s, seed)?;
                let curve = &self.pretrained[&(s, seed)].1;
                let f = curve
                    .tail_mean(CompositionClass::MultipleCrossmodal, TAIL)
                    .ok_or_else(|| Error::Data("curve has no multiple_crossmodal records".into()))?;
                finals.entry(s).or_default().push(f);
            }
        }
        let cur = median(finals[&ScheduleKind::Curriculum].clone());
        let naive = median(finals[&ScheduleKind::Naive].clone());
        let secs = t.elapsed().as_secs_f64();
        let budget = 480.0;
        let in_time = !fresh || secs <= budget;
        Ok(CriterionResult {
            id: 1,
            name: "curriculum convergence contrast".into(),
            pass: cur <= naive && cur < 0.15 && in_time,
            detail: format!(
                "median final multiple_crossmodal loss curriculum {cur:.4} naive {naive:.4} (per seed {:?} vs {:?}){}",
                finals[&ScheduleKind::Curriculum].iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
                finals[&ScheduleKind::Naive].iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
                if fresh { "" } else { "; loaded from cache" }
            ),
            seconds: secs,
            budget_seconds: Some(budget),
        })
    }

    pub fn c02_reflected_knowledge(&mut self) -> Result<CriterionResult> {
        // pretraining is shared with c01; tuning counts even when an earlier check did it
        for seed in KNOWLEDGE_SEEDS {
            self.ensure_tuned(seed)?;
        }
        let t = Instant::now();
        let n_eso = self.view.test.iter().filter(|s| self.world.is_esoteric_text(&s.action.text)).count();
        let eso_frac = n_eso as f64 / self.view.test.len() as f64;
        let held_out = !self.world.non_esoteric(&self.view.train).iter().any(|s| self.world.is_esoteric_text(&s.action.text));
        let in_kb = self.kbs.values().flat_map(|k| &k.entries).any(|e| self.world.is_esoteric_text(&e.sample.action.text));
        let (mut gains, mut wins) = (Vec::new(), Vec::new());
        for seed in KNOWLEDGE_SEEDS {
            let r = self.tuned_matrix(seed)?;
            let base = r.variant_mean(Variant::Base).expect("base evaluated");
            let rk = r.variant_mean(Variant::Rk).expect("RK evaluated");
            gains.push((rk - base) / 100.0);
            let w = matrix_tasks()
                .iter()
                .filter(|task| {
                    let l = task.label();
                    r.task_mean(Variant::Rk, &l) >= r.task_mean(Variant::Ck, &l)
                })
                .count();
            wins.push(w as f64);
        }
        let secs = t.elapsed().as_secs_f64() + self.tune_seconds(&KNOWLEDGE_SEEDS);
        let (g, w) = (median(gains.clone()), median(wins.clone()));
        let budget = 300.0;
        Ok(CriterionResult {
            id: 2,
            name: "reflected knowledge pattern".into(),
            pass: eso_frac >= 0.3 && held_out && in_kb && g >= 0.05 && w >= 6.0 && secs <= budget,
            detail: format!(
                "esoteric test share {:.2}; median RK-base {g:+.4} (per seed {:?}); median tasks with RK>=CK {w}/8",
                eso_frac,
                gains.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>()
            ),
            seconds: secs,
            budget_seconds: Some(budget),
        })
    }

    pub fn sequence_episodes(&self) -> Result<Vec<Episode>> {
        let cfg = DatasetConfig {
            seed: self.cfg.eval.sequence_seed,
            n_episodes: self.cfg.eval.sequence_episodes,
            split: None,
            ..self.cfg.data.clone()
        };
        Ok(generate(&self.world, &cfg)?.episodes())
    }

    pub fn c03_reflected_memory(&mut self) -> Result<CriterionResult> {
        self.ensure_tuned(0)?;
        let t = Instant::now();
        let eps = self.sequence_episodes()?;
        let lengths = [1, 3, 5, 7];
        let r = eval_sequences(
            &ModelPredictor(&self.tuned[&0].model),
            &eps,
            &lengths,
            &[Variant::Base, Variant::Cm, Variant::Rm],
            &EvalOptions { seed: 0, config_hash: self.cfg.hash()?, ..EvalOptions::default() },
        )?;
        let mut ok = eps.len() == 200 && eps.iter().all(|e| e.samples.len() == 7);
        let mut parts = Vec::new();
        for l in [3, 5, 7] {
            let task = format!("L={l}");
            let cm = r.task_mean(Variant::Cm, &task).expect("evaluated");
            let rm = r.task_mean(Variant::Rm, &task).expect("evaluated");
            ok &= rm >= cm;
            parts.push(format!("L={l} RM {rm:.2} CM {cm:.2}"));
        }
        let l1 = r.cells.iter().filter(|c| c.task == "L=1").all(|c| {
            let b = r.cell(Variant::Base, "L=1", c.output).expect("base evaluated").score;
            c.score.to_bits() == b.to_bits()
        });
        let secs = t.elapsed().as_secs_f64() + self.tune_seconds(&[0]);
        let budget = 180.0;
        Ok(CriterionResult {
            id: 3,
            name: "reflected memory pattern".into(),
            pass: ok && l1 && secs <= budget,
            detail: format!("{}; L=1 bit-identical across variants: {l1}", parts.join(", ")),
            seconds: secs,
            budget_seconds: Some(budget),
        })
    }

    pub fn c04_grad_check(&mut self) -> Result<CriterionResult> {
        let t = Instant::now();
        let gc = &self.cfg.grad_check;
        let m = WorldModel::new(ModelConfig { d_model: gc.d_model, seed: 11, ..self.cfg.model.clone() })?;
        let probe = grad_probe(&self.view.train, gc.probe_samples, 5)?;
        let rep = grad_check(
            &m,
            &probe,
            &GradCheckConfig { h: gc.h, entries_per_param: gc.entries_per_param, ..GradCheckConfig::default() },
        )?;
        let mut ok = true;
        let mut parts = Vec::new();
        for c in [Component::Base, Component::Adapters, Component::UnifiedHeads, Component::RenderHeads, Component::Reflector] {
            match rep.groups.get(&c) {
                Some(GroupCheck::Checked { max_rel_err, .. }) => {
                    ok &= *max_rel_err < 1e-4;
                    parts.push(format!("{c} {max_rel_err:.2e}"));
                }
                _ => {
                    ok = false;
                    parts.push(format!("{c} unchecked"));
                }
            }
        }
        let secs = t.elapsed().as_secs_f64();
        let budget = 120.0;
        Ok(CriterionResult {
            id: 4,
            name: "gradient correctness".into(),
            pass: ok && secs <= budget,
            detail: format!("d_model {}: {}", gc.d_model, parts.join(", ")),
            seconds: secs,
            budget_seconds: Some(budget),
        })
    }

    pub fn c05_retrieval(&mut self) -> Result<CriterionResult> {
        let t = Instant::now();
        let pool: Vec<TransitionSample> = self.data.samples.iter().take(512).cloned().collect();
        let queries = generate(&self.world, &DatasetConfig { seed: 77, n_episodes: 150, split: None, ..self.cfg.data.clone() })?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qs: Vec<&TransitionSample> = (0..1000).map(|_| &queries.samples[rng.random_range(0..queries.samples.len())]).collect();
        let mut mismatches = 0usize;
        let mut total = 0usize;
        for size in [1usize, 50, 512] {
            let kb = kb_build(&pool[..size])?;
            let keys: Vec<Embedding> = kb.entries.iter().map(|e| e.key.clone()).collect();
            for k in [1usize, 5, 50] {
                for q in &qs {
                    total += 1;
                    let got = kb_retrieve(&kb, &q.state_before, &q.action, k)?;
                    let qv = encode_query(&q.state_before, &q.action)?;
                    let mut all: Vec<(usize, f64)> =
                        keys.iter().enumerate().map(|(i, key)| Ok((i, cosine_similarity(key, &qv)?))).collect::<Result<_>>()?;
                    // brute force: full order by score then index
                    all.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
                    let want = &all[..k.min(size)];
                    let same = got.len() == want.len()
                        && got.iter().zip(want).all(|((s, sc), (i, wsc))| {
                            std::ptr::eq(*s, &kb.entries[*i].sample) && sc.to_bits() == wsc.to_bits()
                        });
                    mismatches += usize::from(!same);
                }
            }
        }
        let secs = t.elapsed().as_secs_f64();
        let budget = 30.0;
        Ok(CriterionResult {
            id: 5,
            name: "retrieval oracle equivalence".into(),
            pass: mismatches == 0 && total == 9000 && secs <= budget,
            detail: format!("{mismatches} mismatches over {total} retrievals"),
            seconds: secs,
            budget_seconds: Some(budget),
        })
    }

    pub fn c06_rouge(&mut self) -> Result<CriterionResult> {
        let t = Instant::now();
        let cases: [(&str, &str, f64); 6] = [
            ("the cat sat on mat", "the cat ran", 0.5),
            ("a b c d e", "a b c d f", 0.8),
            ("a b c", "a b c", 1.0),
            ("a b c", "d e f", 0.0),
            ("", "", 0.0),
            ("The Cat, sat!", "the cat sat", 1.0),
        ];
        let mut bad: Vec<String> = cases
            .iter()
            .filter(|(a, b, want)| rouge_l(a, b) != *want)
            .map(|(a, b, want)| format!("{a:?}/{b:?} gave {} want {want}", rouge_l(a, b)))
            .collect();
        let mut pool = Pool::new(None);
        let rec = |id: &str, text: &str| InstructionRecord {
            id: id.into(),
            text: text.into(),
            origin: Origin::Seed,
            plan: None,
            completions: None,
            provenance: Provenance::default(),
        };
        filter_and_add(&mut pool, rec("a", "a b c d e"))?;
        if filter_and_add(&mut pool, rec("b", "a b c d f"))? != Admission::Accepted {
            bad.push("score exactly 0.8 was rejected".into());
        }
        if filter_and_add(&mut pool, rec("c", "a b c d e"))? == Admission::Accepted {
            bad.push("duplicate was accepted".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vocab = ["a", "b", "c", "d", "e", "f", "g", "the", "cat", "sat"];
        let sentence = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(0..12);
            (0..n).map(|_| vocab[rng.random_range(0..vocab.len())]).collect::<Vec<_>>().join(" ")
        };
        let mut prop_fail = 0;
        for _ in 0..10_000 {
            let (a, b) = (sentence(&mut rng), sentence(&mut rng));
            let (x, y) = (rouge_l(&a, &b), rouge_l(&b, &a));
            if x != y || !(0.0..=1.0).contains(&x) {
                prop_fail += 1;
            }
        }
        let secs = t.elapsed().as_secs_f64();
        let budget = 10.0;
        Ok(CriterionResult {
            id: 6,
            name: "ROUGE-L exactness".into(),
            pass: bad.is_empty() && prop_fail == 0 && secs <= budget,
            detail: format!("{} hand cases, {} failures; 10000 random pairs, {prop_fail} symmetry/bound failures{}", cases.len() + 2, bad.len(), if bad.is_empty() { String::new() } else { format!(": {}", bad.join("; ")) }),
            seconds: secs,
            budget_seconds: Some(budget),
        })
    }

    pub fn c07_frozen_tuning(&mut self) -> Result<CriterionResult> {
        self.ensure_tuned(0)?;
        let t = Instant::now();
        let tuned = &self.tuned[&0];
        let after = tuned.model.checksums();
        let mut kept = Vec::new();
        let mut ok = true;
        for c in [Component::Base, Component::Adapters, Component::UnifiedHeads, Component::RenderHeads, Component::ContextLift] {
            let same = tuned.before.get(&c) == after.get(&c);
            ok &= same;
            kept.push(format!("{c} {}", if same { "unchanged" } else { "CHANGED" }));
        }
        let refl = tuned.before.get(&Component::Reflector) != after.get(&Component::Reflector);
        ok &= refl && self.integrity.is_empty();
        let mut detail = format!("{}; reflector {}", kept.join(", "), if refl { "changed" } else { "UNCHANGED" });
        if !self.integrity.is_empty() {
            detail.push_str(&format!("; integrity failures: {}", self.integrity.join("; ")));
        }
        let secs = t.elapsed().as_secs_f64() + self.tune_seconds(&[0]);
        Ok(CriterionResult {
            id: 7,
            name: "frozen-tuning soundness".into(),
            pass: ok,
            detail,
            seconds: secs,
            budget_seconds: Some(180.0),
        })
    }

    pub fn c08_projector(&mut self) -> Result<CriterionResult> {
        let t = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (ds, dt, n) = (self.world.d_enc, 32, 256);
        let w: Vec<f64> = (0..dt * ds).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..dt).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pairs: Vec<(Embedding, Embedding)> = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..ds).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y = (0..dt).map(|r| (0..ds).map(|c| w[r * ds + c] * x[c]).sum::<f64>() + b[r]).collect();
                (Embedding(x), Embedding(y))
            })
            .collect();
        let fit = fit_agent_projector(&pairs)?;
        let err = fit
            .projector
            .matrix
            .data
            .iter()
            .zip(&w)
            .chain(fit.projector.bias.iter().zip(&b))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok(CriterionResult {
            id: 8,
            name: "projector recovery".into(),
            pass: err < 1e-8 && fit.residual < 1e-12,
            detail: format!("{dt}x{ds} affine map from {n} pairs: max abs parameter error {err:.2e}, residual {:.2e}", fit.residual),
            seconds: t.elapsed().as_secs_f64(),
            budget_seconds: None,
        })
    }

    pub fn c09_eval_structure(&mut self) -> Result<CriterionResult> {
        let t = Instant::now();
        let opts = EvalOptions { top_k: 1, train: Some(&self.view.train), ..EvalOptions::default() };
        let oracle = OraclePredictor::new(&self.world, &self.data.sidecar);
        let r = eval_matrix(&oracle, &self.view.test, &self.kbs, &[Variant::Base, Variant::Ck, Variant::Rk], &opts)?;
        let labels: Vec<String> = matrix_tasks().iter().map(|t| t.label()).collect();
        let tasks_ok = r.tasks() == labels;
        let full = r.cells.iter().all(|c| format!("{:.1}", c.score) == "100.0");
        let md = r.to_markdown(false);
        let joint = md.lines().filter(|l| l.starts_with("| base ")).any(|l| l.contains("100.0/100.0/100.0") && l.contains("100.0/100.0 |"));
        let m = WorldModel::new(ModelConfig { d_model: 16, seed: 3, ..self.cfg.model.clone() })?;
        let p = ModelPredictor(&m);
        let sub = &self.view.test[..24];
        let rr = eval_matrix(&p, sub, &BTreeMap::new(), &[Variant::Base, Variant::Ck, Variant::Rk], &EvalOptions::default())?;
        let eps: Vec<Episode> = self.data.episodes().into_iter().take(8).collect();
        let rs = eval_sequences(&p, &eps, &[1], &[Variant::Base, Variant::Cm, Variant::Rm], &EvalOptions::default())?;
        let reduces = |r: &EvalReport| {
            r.cells.iter().all(|c| {
                r.cell(Variant::Base, &c.task, c.output).is_some_and(|b| b.score.to_bits() == c.score.to_bits())
            })
        };
        let red = reduces(&rr) && reduces(&rs);
        Ok(CriterionResult {
            id: 9,
            name: "framing/eval structure".into(),
            pass: tasks_ok && full && joint && red,
            detail: format!(
                "8 tasks in order: {tasks_ok}; oracle 100.0 in all {} cells: {full}; slash-joined joint outputs: {joint}; empty KB/history reduce to base: {red}",
                r.cells.len()
            ),
            seconds: t.elapsed().as_secs_f64(),
            budget_seconds: None,
        })
    }

    pub fn c10_synthesis(&mut self) -> Result<CriterionResult> {
        self.tuned_matrix(0)?;
        let t = Instant::now();
        let all = matrix_tasks().pop().expect("eight tasks").label();
        let r = self.tuned[&0].matrix.as_ref().expect("evaluated");
        let cells: Vec<_> = r.cells.iter().filter(|c| c.task == all && c.variant == Variant::Base).collect();
        let eval_score =
            cells.iter().map(|c| c.score * c.count as f64).sum::<f64>() / cells.iter().map(|c| c.count as f64).sum::<f64>() / 100.0;
        let grammar = MockGrammar::from_world(&self.world)?;
        let seeds = grammar.seed_instructions(self.cfg.synthesis.seed_pool_size, 0, ROUGE_THRESHOLD)?;
        let grounding: Vec<TransitionSample> = self.view.kb.values().flatten().cloned().collect();
        let model = &self.tuned[&0].model;
        let run = || -> Result<(Vec<u8>, crate::synthesis::SynthesisSummary, Pool)> {
            let mut pool = seed_pool(&seeds, None)?;
            let completer = Completer { model, encoder: &self.world.text_encoder, grounding: &grounding, history: self.cfg.synthesis.history };
            let cfg = crate::synthesis::SynthesisConfig { seed: 0, seed_pool_size: 50, target_pool_size: 200, ..self.cfg.synthesis.clone() };
            let s = synthesize(&mut pool, &MockProvider::new(0, grammar.clone()), Some(&completer), &cfg)?;
            Ok((pool.to_jsonl()?, s, pool))
        };
        let (a, sa, pool) = run()?;
        let (b, sb, _) = run()?;
        let reproducible = a == b && sa == sb;
        let sizes_ok = pool.len() == 200 && pool.records.iter().filter(|r| r.origin == Origin::Seed).count() == 50;
        let mut order_ok = true;
        for (i, r) in pool.records.iter().enumerate() {
            order_ok &= pool.records[..i].iter().all(|e| rouge_l(&r.text, &e.text) <= ROUGE_THRESHOLD);
        }
        let rejections_ok = sa.rejected.iter().all(|x| x.max_rouge > ROUGE_THRESHOLD || x.reason.starts_with("unparseable"));
        let n_rouge_rej = sa.rejected.iter().filter(|x| x.max_rouge > ROUGE_THRESHOLD).count();
        let index = self.data.sidecar.index();
        let mut scores = Vec::new();
        for rec in &pool.records {
            let is_tc = rec.plan.as_ref().is_some_and(|p| p.pattern == PlanPattern::TransitionConditioned);
            let bank = rec.plan.as_ref().is_some_and(|p| p.actions.iter().all(|a| self.world.action_by_text(a).is_some()));
            if is_tc && bank {
                if let Some(s) = rollout_agreement(&self.world, &index, rec)? {
                    scores.push(s);
                }
            }
        }
        let within = scores.iter().filter(|s| (**s - eval_score).abs() <= 0.05).count();
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        let (lo, hi) = scores.iter().fold((f64::MAX, f64::MIN), |(l, h), s| (l.min(*s), h.max(*s)));
        let consistent = !scores.is_empty() && within == scores.len();
        Ok(CriterionResult {
            id: 10,
            name: "synthesis pipeline reproducibility".into(),
            pass: reproducible && sizes_ok && order_ok && rejections_ok && consistent,
            detail: format!(
                "byte-reproducible: {reproducible}; pool 50->{} with {n_rouge_rej} ROUGE-L rejections, admission order respected: {}; \
                 completions within 0.05 of all->all eval score {eval_score:.4}: {within}/{} (mean {mean:.4}, range {lo:.4}..{hi:.4})",
                pool.len(),
                order_ok && rejections_ok,
                scores.len()
            ),
            seconds: t.elapsed().as_secs_f64(),
            budget_seconds: None,
        })
    }

    /// Runs one check, turning an error into a failed result.
    pub fn run(&mut self, id: usize) -> CriterionResult {
        let out = match id {
            1 => self.c01_curriculum(),
            2 => self.c02_reflected_knowledge(),
            3 => self.c03_reflected_memory(),
            4 => self.c04_grad_check(),
            5 => self.c05_retrieval(),
            6 => self.c06_rouge(),
            7 => self.c07_frozen_tuning(),
            8 => self.c08_projector(),
            9 => self.c09_eval_structure(),
            10 => self.c10_synthesis(),
            _ => Err(Error::InvalidConfig(format!("no criterion {id}"))),
        };
        out.unwrap_or_else(|e| CriterionResult {
            id,
            name: format!("criterion {id}"),
            pass: false,
            detail: format!("error: {e}"),
            seconds: 0.0,
            budget_seconds: None,
        })
    }

    pub fn run_all(&mut self, mut on_result: impl FnMut(&CriterionResult)) -> Result<ReproSummary> {
        let mut criteria = Vec::new();
        for id in 1..=10 {
            let r = self.run(id);
            on_result(&r);
            criteria.push(r);
        }
        Ok(ReproSummary {
            config_hash: self.cfg.hash()?,
            all_pass: criteria.iter().all(|c| c.pass),
            criteria,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn result_line_format() {
        let r = CriterionResult { id: 3, name: "x".into(), pass: true, detail: "ok".into(), seconds: 1.25, budget_seconds: Some(180.0) };
        assert_eq!(r.line(), "[PASS] c03 x: ok (1.2s / 180s)");
    }
}
