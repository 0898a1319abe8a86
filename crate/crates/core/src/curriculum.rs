//! Modality-composition classes, the staged schedule, and per-sample task draws.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Modality, TransitionSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionClass {
    SingleUnimodal,
    SingleCrossmodal,
    MultipleUnimodal,
    MultipleCrossmodal,
}

impl CompositionClass {
    pub const ALL: [CompositionClass; 4] = [
        CompositionClass::SingleUnimodal,
        CompositionClass::SingleCrossmodal,
        CompositionClass::MultipleUnimodal,
        CompositionClass::MultipleCrossmodal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CompositionClass::SingleUnimodal => "single_unimodal",
            CompositionClass::SingleCrossmodal => "single_crossmodal",
            CompositionClass::MultipleUnimodal => "multiple_unimodal",
            CompositionClass::MultipleCrossmodal => "multiple_crossmodal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        CompositionClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown composition class {s}")))
    }
}

impl fmt::Display for CompositionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Unimodal iff every output is also an input; single iff one input and one output.
pub fn classify_composition(inputs: &BTreeSet<Modality>, outputs: &BTreeSet<Modality>) -> Result<CompositionClass> {
    if inputs.is_empty() || outputs.is_empty() {
        return Err(Error::EmptySet);
    }
    if inputs.contains(&Modality::Text) || outputs.contains(&Modality::Text) {
        return Err(Error::UnknownModality(Modality::Text));
    }
    let unimodal = outputs.is_subset(inputs);
    let single = inputs.len() == 1 && outputs.len() == 1;
    Ok(match (single, unimodal) {
        (true, true) => CompositionClass::SingleUnimodal,
        (true, false) => CompositionClass::SingleCrossmodal,
        (false, true) => CompositionClass::MultipleUnimodal,
        (false, false) => CompositionClass::MultipleCrossmodal,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub stage_length: usize,
    pub classes: Vec<CompositionClass>,
    pub total_epochs: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            stage_length: 4,
            classes: CompositionClass::ALL.to_vec(),
            total_epochs: 16,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stage_length == 0 || self.total_epochs == 0 {
            return Err(Error::InvalidConfig("stage_length and total_epochs must be >= 1".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::InvalidConfig("curriculum needs at least one class".into()));
        }
        let uniq: BTreeSet<_> = self.classes.iter().collect();
        if uniq.len() != self.classes.len() {
            return Err(Error::InvalidConfig("curriculum classes must be distinct".into()));
        }
        Ok(())
    }
}

/// Cumulative prefix of length `ceil(epoch / stage_length)`, `epoch` 1-based.
pub fn allowed_classes(schedule: &CurriculumSchedule, epoch: usize) -> Result<BTreeSet<CompositionClass>> {
    if epoch == 0 || epoch > schedule.total_epochs {
        return Err(Error::EpochOutOfRange {
            epoch,
            total: schedule.total_epochs,
        });
    }
    let n = epoch.div_ceil(schedule.stage_length).min(schedule.classes.len());
    Ok(schedule.classes[..n].iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub inputs: BTreeSet<Modality>,
    pub outputs: BTreeSet<Modality>,
    pub class: CompositionClass,
}

fn nonempty_subsets(mods: &[Modality]) -> Vec<BTreeSet<Modality>> {
    (1u32..(1 << mods.len()))
        .map(|mask| {
            mods.iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, m)| *m)
                .collect()
        })
        .collect()
}

/// Every (inputs, outputs) pair realizable from the given modalities, with its class.
pub fn realizable_pairs(before: &[Modality], after: &[Modality]) -> Vec<TaskSpec> {
    let ins = nonempty_subsets(before);
    let outs = nonempty_subsets(after);
    let mut v = Vec::with_capacity(ins.len() * outs.len());
    for i in &ins {
        for o in &outs {
            let class = classify_composition(i, o).expect("non-empty subsets of state modalities");
            v.push(TaskSpec {
                inputs: i.clone(),
                outputs: o.clone(),
                class,
            });
        }
    }
    v
}

/// Uniform over realizable pairs whose class is allowed.
pub fn sample_task(sample: &TransitionSample, allowed: &BTreeSet<CompositionClass>, rng: &mut impl Rng) -> Result<TaskSpec> {
    let before: Vec<Modality> = sample.state_before.present().filter(|m| *m != Modality::Text).collect();
    let after: Vec<Modality> = sample.state_after.present().filter(|m| *m != Modality::Text).collect();
    let pairs: Vec<TaskSpec> = realizable_pairs(&before, &after)
        .into_iter()
        .filter(|t| allowed.contains(&t.class))
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoRealizableTask { sample: sample.id() });
    }
    Ok(pairs[rng.random_range(0..pairs.len())].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ActionDesc, Embedding, WorldState};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;
    use CompositionClass::*;
    use Modality::*;

    fn set(m: &[Modality]) -> BTreeSet<Modality> {
        m.iter().copied().collect()
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_composition(&set(&[Image]), &set(&[Image])).unwrap(), SingleUnimodal);
        assert_eq!(classify_composition(&set(&[Image, Audio]), &set(&[Video])).unwrap(), MultipleCrossmodal);
        assert_eq!(classify_composition(&set(&[Image, Video]), &set(&[Image])).unwrap(), MultipleUnimodal);
        assert_eq!(classify_composition(&set(&[Image]), &set(&[Video])).unwrap(), SingleCrossmodal);
        assert_eq!(classify_composition(&set(&[Image]), &set(&[Video, Audio])).unwrap(), MultipleCrossmodal);
        assert!(matches!(classify_composition(&set(&[]), &set(&[Image])), Err(Error::EmptySet)));
    }

    #[test]
    fn pair_counts_for_three_modalities() {
        let pairs = realizable_pairs(&Modality::STATE, &Modality::STATE);
        assert_eq!(pairs.len(), 49);
        let count = |c| pairs.iter().filter(|p| p.class == c).count();
        assert_eq!(
            [count(SingleUnimodal), count(SingleCrossmodal), count(MultipleUnimodal), count(MultipleCrossmodal)],
            [3, 6, 16, 24]
        );
    }

    #[test]
    fn schedule_examples() {
        let s = CurriculumSchedule::default();
        assert_eq!(allowed_classes(&s, 2).unwrap(), [SingleUnimodal].into());
        assert_eq!(allowed_classes(&s, 6).unwrap(), [SingleUnimodal, SingleCrossmodal].into());
        assert_eq!(allowed_classes(&s, 15).unwrap().len(), 4);
        assert!(matches!(allowed_classes(&s, 0), Err(Error::EpochOutOfRange { .. })));
        assert!(matches!(allowed_classes(&s, 17), Err(Error::EpochOutOfRange { .. })));
    }

    fn sample(before: &[Modality], after: &[Modality]) -> TransitionSample {
        let st = |ms: &[Modality]| {
            WorldState::new(ms.iter().map(|m| (*m, Embedding(vec![1.0, m.index() as f64]))).collect::<BTreeMap<_, _>>()).unwrap()
        };
        TransitionSample {
            state_before: st(before),
            action: ActionDesc::new("a", Embedding(vec![1.0, 0.0])).unwrap(),
            state_after: st(after),
            scenario: "s".into(),
            episode_id: "e".into(),
            step_index: 0,
        }
    }

    #[test]
    fn forced_and_unrealizable() {
        let s = sample(&[Image], &[Image]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_task(&s, &[SingleUnimodal].into(), &mut rng).unwrap();
        assert_eq!((t.inputs, t.outputs), (set(&[Image]), set(&[Image])));
        assert!(matches!(
            sample_task(&s, &[MultipleCrossmodal].into(), &mut rng),
            Err(Error::NoRealizableTask { .. })
        ));
    }

    #[test]
    fn empirical_frequencies_match_pair_counts() {
        let s = sample(&Modality::STATE, &Modality::STATE);
        let all: BTreeSet<_> = CompositionClass::ALL.into();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000usize;
        let mut counts: BTreeMap<CompositionClass, usize> = BTreeMap::new();
        for _ in 0..n {
            *counts.entry(sample_task(&s, &all, &mut rng).unwrap().class).or_default() += 1;
        }
        let pairs = realizable_pairs(&Modality::STATE, &Modality::STATE);
        for c in CompositionClass::ALL {
            let p = pairs.iter().filter(|t| t.class == c).count() as f64 / pairs.len() as f64;
            let mean = n as f64 * p;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            let got = counts.get(&c).copied().unwrap_or(0) as f64;
            assert!((got - mean).abs() <= 3.0 * sd, "{c}: {got} vs {mean} ± {sd}");
        }
    }

    fn modset() -> impl Strategy<Value = Vec<Modality>> {
        proptest::sample::subsequence(Modality::STATE.to_vec(), 1..=3)
    }

    proptest! {
        #[test]
        fn allowed_is_monotone(stage in 1usize..6, total in 1usize..30, a in 1usize..30, b in 1usize..30) {
            let s = CurriculumSchedule { stage_length: stage, total_epochs: total, ..CurriculumSchedule::default() };
            let (e1, e2) = (a.min(b).min(total), a.max(b).min(total));
            prop_assert!(allowed_classes(&s, e1).unwrap().is_subset(&allowed_classes(&s, e2).unwrap()));
        }

        #[test]
        fn classify_order_free(i in modset(), o in modset()) {
            let mut ri = i.clone();
            ri.reverse();
            let mut ro = o.clone();
            ro.reverse();
            prop_assert_eq!(
                classify_composition(&i.into_iter().collect(), &o.into_iter().collect()).unwrap(),
                classify_composition(&ri.into_iter().collect(), &ro.into_iter().collect()).unwrap()
            );
        }

        #[test]
        fn sampled_tasks_are_consistent(b in modset(), a in modset(), seed in 0u64..1000) {
            let s = sample(&b, &a);
            let all: BTreeSet<_> = CompositionClass::ALL.into();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = sample_task(&s, &all, &mut rng).unwrap();
            prop_assert_eq!(classify_composition(&t.inputs, &t.outputs).unwrap(), t.class);
            prop_assert!(t.inputs.iter().all(|m| b.contains(m)));
            prop_assert!(t.outputs.iter().all(|m| a.contains(m)));
        }
    }
}
