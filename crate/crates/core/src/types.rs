//! Shared domain types for the unified embedding space.
//!
//! Every modality is represented by a single dense vector in a common space.
//! The types here are plain immutable values; the similarity helpers are pure.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Norms below this are treated as degenerate.
pub const ZERO_NORM: f64 = 1e-12;

/// Modality tag. The derived ordering (image < video < audio < text) is the
/// canonical order used wherever a deterministic modality order is needed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Image,
        Modality::Video,
        Modality::Audio,
        Modality::Text,
    ];

    /// The modalities a world state can carry (text is action-only).
    pub const STATE: [Modality; 3] = [Modality::Image, Modality::Video, Modality::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }

    /// Surface form of the delimiter tag, e.g. `VID` for `<VID> ... </VID>`.
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Image => "IMG",
            Modality::Video => "VID",
            Modality::Audio => "AUD",
            Modality::Text => "TXT",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "image" => Ok(Modality::Image),
            "video" => Ok(Modality::Video),
            "audio" => Ok(Modality::Audio),
            "text" => Ok(Modality::Text),
            other => Err(Error::InvalidConfig(format!("unknown modality `{other}`"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A dense vector in one embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Embedding {
        Embedding(self.0.iter().map(|v| v * c).collect())
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Embedding(v)
    }
}

/// Lowercase, drop ASCII punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `dot(a, b) / (|a| |b|)`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim("cosine_similarity", a.dim(), b.dim()));
    }
    let na = a.norm();
    let nb = b.norm();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn normalize(a: &Embedding) -> Result<Embedding> {
    let n = a.norm();
    if n < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(Embedding(a.0.iter().map(|v| v / n).collect()))
}

/// One world state: an embedding per present (non-text) modality plus an
/// optional textual description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    modalities: BTreeMap<Modality, Embedding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

impl WorldState {
    pub fn new(modalities: BTreeMap<Modality, Embedding>) -> Result<Self> {
        Self::with_text(modalities, None)
    }

    pub fn with_text(modalities: BTreeMap<Modality, Embedding>, text: Option<String>) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::InvalidSample("world state has no modality".into()));
        }
        if modalities.contains_key(&Modality::Text) {
            return Err(Error::InvalidSample("text is not a state modality".into()));
        }
        let mut dims = modalities.values().map(Embedding::dim);
        let d = dims.next().unwrap_or(0);
        if let Some(bad) = dims.find(|&x| x != d) {
            return Err(Error::dim("world state", d, bad));
        }
        if modalities.values().any(|e| !e.is_finite()) {
            return Err(Error::InvalidSample("non-finite embedding".into()));
        }
        Ok(WorldState { modalities, text })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Modality, Embedding)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (m, e) in pairs {
            if map.insert(m, e).is_some() {
                return Err(Error::InvalidSample(format!("duplicate modality {m}")));
            }
        }
        Self::new(map)
    }

    pub fn modalities(&self) -> &BTreeMap<Modality, Embedding> {
        &self.modalities
    }

    pub fn get(&self, m: Modality) -> Option<&Embedding> {
        self.modalities.get(&m)
    }

    pub fn present(&self) -> impl Iterator<Item = Modality> + '_ {
        self.modalities.keys().copied()
    }

    pub fn text(&self) -> Option<&str> {
        self.text.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.modalities.values().next().map_or(0, Embedding::dim)
    }

    /// Keep only the listed modalities. Fails if none remain.
    pub fn restrict(&self, keep: &[Modality]) -> Result<WorldState> {
        let map: BTreeMap<_, _> = self
            .modalities
            .iter()
            .filter(|(m, _)| keep.contains(m))
            .map(|(m, e)| (*m, e.clone()))
            .collect();
        WorldState::with_text(map, self.text.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDesc {
    pub text: String,
    pub embedding: Embedding,
}

impl ActionDesc {
    pub fn new(text: impl Into<String>, embedding: Embedding) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidSample("empty action text".into()));
        }
        Ok(ActionDesc { text, embedding })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSample {
    pub state_before: WorldState,
    pub action: ActionDesc,
    pub state_after: WorldState,
    pub scenario: String,
    pub episode_id: String,
    pub step_index: u64,
}

impl TransitionSample {
    pub fn validate(&self) -> Result<()> {
        let d = self.state_before.dim();
        if self.state_after.dim() != d {
            return Err(Error::dim("state_after", d, self.state_after.dim()));
        }
        if self.action.embedding.dim() != d {
            return Err(Error::dim("action embedding", d, self.action.embedding.dim()));
        }
        Ok(())
    }

    pub fn id(&self) -> String {
        format!("{}:{}", self.episode_id, self.step_index)
    }

    /// Hash of the sample content (states, action, scenario), ignoring ids.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.scenario.as_bytes());
        h.update([0u8]);
        h.update(self.action.text.as_bytes());
        h.update([0u8]);
        for state in [&self.state_before, &self.state_after] {
            for (m, e) in state.modalities() {
                h.update([m.index() as u8]);
                for v in e.as_slice() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
            h.update([0xff]);
        }
        h.finalize().into()
    }
}

fn mean_of_normalized<'a>(embeddings: impl Iterator<Item = &'a Embedding>) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for e in embeddings {
        let n = normalize(e)?;
        match acc.as_mut() {
            None => acc = Some(n.0),
            Some(a) => {
                if a.len() != n.dim() {
                    return Err(Error::dim("state embeddings", a.len(), n.dim()));
                }
                a.iter_mut().zip(&n.0).for_each(|(x, y)| *x += y);
            }
        }
        count += 1;
    }
    let mut acc = acc.ok_or_else(|| Error::InvalidSample("world state has no modality".into()))?;
    let inv = 1.0 / count as f64;
    acc.iter_mut().for_each(|x| *x *= inv);
    Ok(acc)
}

/// Mean of normalized state embeddings (canonical order) concatenated with the
/// normalized action embedding. Dimension `2 * d_enc`, not normalized.
pub fn condition_vector(state: &WorldState, action: &ActionDesc) -> Result<Embedding> {
    let mut v = mean_of_normalized(state.modalities().values())?;
    let a = normalize(&action.embedding)?;
    if a.dim() != v.len() {
        return Err(Error::dim("action embedding", v.len(), a.dim()));
    }
    v.extend_from_slice(&a.0);
    Ok(Embedding(v))
}

/// Retrieval key for a (state, action) query.
pub fn encode_query(state: &WorldState, action: &ActionDesc) -> Result<Embedding> {
    normalize(&condition_vector(state, action)?)
}

/// Retrieval key of a transition sample: depends only on `state_before` and
/// the action embedding.
pub fn unified_encode(sample: &TransitionSample) -> Result<Embedding> {
    encode_query(&sample.state_before, &sample.action)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding(v.to_vec())
    }

    #[test]
    fn cosine_examples() {
        let v = e(&[0.3, -1.2, 4.0]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&e(&[1.0, 1.0]), &e(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatch() {
        assert!(matches!(
            cosine_similarity(&e(&[0.0, 0.0]), &e(&[1.0, 0.0])),
            Err(Error::ZeroVector)
        ));
        assert!(matches!(
            cosine_similarity(&e(&[1.0]), &e(&[1.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&e(&[3.0, 4.0])).unwrap();
        assert!((n.0[0] - 0.6).abs() < 1e-15 && (n.0[1] - 0.8).abs() < 1e-15);
        let u = e(&[0.0, 1.0, 0.0]);
        assert_eq!(normalize(&u).unwrap(), u);
        assert!(matches!(normalize(&e(&[0.0, 0.0])), Err(Error::ZeroVector)));
    }

    fn sample_with(state: Vec<(Modality, Embedding)>, action_text: &str, action: Embedding) -> TransitionSample {
        let before = WorldState::from_pairs(state).unwrap();
        TransitionSample {
            state_after: before.clone(),
            state_before: before,
            action: ActionDesc::new(action_text, action).unwrap(),
            scenario: "s".into(),
            episode_id: "ep".into(),
            step_index: 0,
        }
    }

    #[test]
    fn unified_encode_single_modality_unrolled() {
        let img = e(&[1.0, 2.0, 2.0]);
        let act = e(&[0.0, 3.0, 4.0]);
        let s = sample_with(vec![(Modality::Image, img.clone())], "push", act.clone());
        let key = unified_encode(&s).unwrap();
        let mut cat = normalize(&img).unwrap().0;
        cat.extend(normalize(&act).unwrap().0);
        let expect = normalize(&Embedding(cat)).unwrap();
        assert_eq!(key, expect);
        assert_eq!(key.dim(), 6);
        assert_eq!(unified_encode(&s).unwrap(), key);
    }

    #[test]
    fn unified_encode_ignores_action_text() {
        let img = e(&[1.0, 0.5]);
        let act = e(&[0.2, 0.9]);
        let a = sample_with(vec![(Modality::Image, img.clone())], "lift", act.clone());
        let b = sample_with(vec![(Modality::Image, img)], "something else", act);
        assert_eq!(unified_encode(&a).unwrap(), unified_encode(&b).unwrap());
    }

    #[test]
    fn condition_vector_is_unnormalized_key() {
        let s = sample_with(
            vec![(Modality::Audio, e(&[1.0, 0.0])), (Modality::Image, e(&[0.0, 2.0]))],
            "x",
            e(&[1.0, 1.0]),
        );
        let c = condition_vector(&s.state_before, &s.action).unwrap();
        // mean of [1,0] and [0,1], then normalized action
        let h = 0.5f64.sqrt();
        for (got, want) in c.0.iter().zip([0.5, 0.5, h, h]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(normalize(&c).unwrap(), unified_encode(&s).unwrap());
    }

    #[test]
    fn world_state_invariants() {
        assert!(WorldState::new(BTreeMap::new()).is_err());
        assert!(WorldState::from_pairs(vec![(Modality::Text, e(&[1.0]))]).is_err());
        assert!(WorldState::from_pairs(vec![(Modality::Image, e(&[1.0])), (Modality::Image, e(&[2.0]))]).is_err());
        assert!(WorldState::from_pairs(vec![(Modality::Image, e(&[1.0])), (Modality::Audio, e(&[2.0, 1.0]))]).is_err());
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(a in vec_strategy(8), b in vec_strategy(8), c in 0.01f64..100.0) {
            let (a, b) = (Embedding(a), Embedding(b));
            prop_assume!(a.norm() > 1e-6 && b.norm() > 1e-6);
            let ab = cosine_similarity(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
            prop_assert!((cosine_similarity(&a.scaled(c), &b).unwrap() - ab).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn normalize_has_unit_norm(a in vec_strategy(16)) {
            let a = Embedding(a);
            prop_assume!(a.norm() > 1e-6);
            prop_assert!((normalize(&a).unwrap().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn unified_encode_insertion_order_free(x in vec_strategy(4), y in vec_strategy(4), z in vec_strategy(4), act in vec_strategy(4)) {
            let (x, y, z, act) = (Embedding(x), Embedding(y), Embedding(z), Embedding(act));
            prop_assume!(x.norm() > 1e-6 && y.norm() > 1e-6 && z.norm() > 1e-6 && act.norm() > 1e-6);
            let a = sample_with(vec![(Modality::Image, x.clone()), (Modality::Video, y.clone()), (Modality::Audio, z.clone())], "a", act.clone());
            let b = sample_with(vec![(Modality::Audio, z), (Modality::Image, x), (Modality::Video, y)], "a", act);
            prop_assert_eq!(unified_encode(&a).unwrap(), unified_encode(&b).unwrap());
        }
    }
}
