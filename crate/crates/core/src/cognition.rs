//! Dense-retrieval knowledge base and per-episode working memory.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framing::ContextTokens;
use crate::io::{read_to_string, to_json_sig17, to_jsonl_sig17, write_atomic};
use crate::model::WorldModel;
use crate::reflector::{ContextSource, Slot};
use crate::types::{cosine_similarity, encode_query, unified_encode, ActionDesc, Embedding, Modality, TransitionSample, WorldState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    pub key: Embedding,
    pub sample: TransitionSample,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    pub scenario: Option<String>,
    pub entries: Vec<KbEntry>,
}

/// Retrieval backend contract: top-`k` entry indices with similarity,
/// descending, ties by insertion order.
pub trait Retriever {
    fn top_k(&self, kb: &KnowledgeBase, query: &Embedding, k: usize) -> Result<Vec<(usize, f64)>>;
}

/// Exhaustive cosine scan.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactScan;

impl Retriever for ExactScan {
    fn top_k(&self, kb: &KnowledgeBase, query: &Embedding, k: usize) -> Result<Vec<(usize, f64)>> {
        let mut scored = kb
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| Ok((i, cosine_similarity(&e.key, query)?)))
            .collect::<Result<Vec<_>>>()?;
        // stable sort keeps insertion order among equal scores
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.truncate(k);
        Ok(scored)
    }
}

pub fn kb_build(samples: &[TransitionSample]) -> Result<KnowledgeBase> {
    let entries = samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let key = unified_encode(s).map_err(|e| Error::SampleEncoding {
                index,
                source: Box::new(e),
            })?;
            Ok(KbEntry { key, sample: s.clone() })
        })
        .collect::<Result<_>>()?;
    let scenario = samples.first().map(|s| s.scenario.clone()).filter(|sc| samples.iter().all(|s| &s.scenario == sc));
    Ok(KnowledgeBase { scenario, entries })
}

impl KnowledgeBase {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries sorted by similarity to the query key.
    pub fn retrieve_with(
        &self,
        backend: &dyn Retriever,
        state: &WorldState,
        action: &ActionDesc,
        k: usize,
    ) -> Result<Vec<(&TransitionSample, f64)>> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if self.entries.is_empty() {
            return Err(Error::EmptyKnowledgeBase);
        }
        let q = encode_query(state, action)?;
        Ok(backend
            .top_k(self, &q, k)?
            .into_iter()
            .map(|(i, s)| (&self.entries[i].sample, s))
            .collect())
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        to_jsonl_sig17(&self.entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_jsonl()?)
    }

    /// Load a KB export, checking every stored key against its sample.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: KbEntry =
                serde_json::from_str(line).map_err(|err| Error::Data(format!("{}:{}: {err}", path.display(), i + 1)))?;
            if unified_encode(&e.sample)? != e.key {
                return Err(Error::Data(format!("{}:{}: stored key does not match its sample", path.display(), i + 1)));
            }
            entries.push(e);
        }
        let scenario = entries
            .first()
            .map(|e| e.sample.scenario.clone())
            .filter(|sc| entries.iter().all(|e| &e.sample.scenario == sc));
        Ok(KnowledgeBase { scenario, entries })
    }
}

pub fn kb_retrieve<'a>(
    kb: &'a KnowledgeBase,
    state: &WorldState,
    action: &ActionDesc,
    k: usize,
) -> Result<Vec<(&'a TransitionSample, f64)>> {
    kb.retrieve_with(&ExactScan, state, action, k)
}

/// Build one knowledge base per scenario.
pub fn kb_build_per_scenario(samples: &[TransitionSample]) -> Result<BTreeMap<String, KnowledgeBase>> {
    let mut groups: BTreeMap<String, Vec<TransitionSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.scenario.clone()).or_default().push(s.clone());
    }
    groups.into_iter().map(|(k, v)| Ok((k, kb_build(&v)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub step_index: u64,
    pub state: WorldState,
    pub action: ActionDesc,
    #[serde(default)]
    pub prediction: Option<BTreeMap<Modality, Embedding>>,
    #[serde(default)]
    pub ground_truth: Option<WorldState>,
}

impl MemoryEntry {
    /// After-state rows come from the ground truth where observed and from the
    /// prediction for anything else.
    pub fn context_source(&self) -> Result<ContextSource> {
        let mut after: BTreeMap<Modality, Embedding> = BTreeMap::new();
        if let Some(p) = &self.prediction {
            after.extend(p.iter().map(|(m, e)| (*m, e.clone())));
        }
        if let Some(gt) = &self.ground_truth {
            after.extend(gt.modalities().iter().map(|(m, e)| (*m, e.clone())));
        }
        let mut src = ContextSource::new(&self.state, &self.action, None)?;
        src.rows.extend(after.into_iter().map(|(m, e)| (Slot::After(m), e)));
        let d = self.state.dim();
        if let Some((_, e)) = src.rows.iter().find(|(_, e)| e.dim() != d) {
            return Err(Error::dim("memory row", d, e.dim()));
        }
        Ok(src)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecallForm {
    Raw,
    Reflected,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Recalled {
    /// Lifted context rows (`n_ctx × d_q`).
    Raw(crate::tensor::Matrix),
    Reflected(ContextTokens),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryStore {
    episodes: HashMap<String, Vec<MemoryEntry>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        MemoryStore::default()
    }

    pub fn append(&mut self, episode_id: &str, entry: MemoryEntry) -> Result<()> {
        let list = self.episodes.entry(episode_id.to_string()).or_default();
        if let Some(last) = list.last() {
            if entry.step_index <= last.step_index {
                return Err(Error::NonMonotonicStep {
                    episode: episode_id.to_string(),
                    last: last.step_index,
                    got: entry.step_index,
                });
            }
        }
        list.push(entry);
        Ok(())
    }

    pub fn len(&self, episode_id: &str) -> usize {
        self.episodes.get(episode_id).map_or(0, Vec::len)
    }

    pub fn entries(&self, episode_id: &str) -> Result<&[MemoryEntry]> {
        self.episodes
            .get(episode_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownEpisode(episode_id.to_string()))
    }

    /// Last `min(h, len)` entries, oldest first.
    pub fn recent(&self, episode_id: &str, h: usize) -> Result<&[MemoryEntry]> {
        let list = self.entries(episode_id)?;
        Ok(&list[list.len() - h.min(list.len())..])
    }

    /// Context sources of the last `h` entries.
    pub fn recall_sources(&self, episode_id: &str, h: usize) -> Result<Vec<ContextSource>> {
        self.recent(episode_id, h)?.iter().map(MemoryEntry::context_source).collect()
    }

    pub fn dump(&self) -> Result<Vec<u8>> {
        let sorted: BTreeMap<&String, &Vec<MemoryEntry>> = self.episodes.iter().collect();
        to_json_sig17(&sorted)
    }
}

/// Recall in either form. Reflected recall is conditioned on the current query.
pub fn memory_recall(
    store: &MemoryStore,
    episode_id: &str,
    h: usize,
    form: RecallForm,
    model: &WorldModel,
    query: (&WorldState, &ActionDesc),
) -> Result<Vec<Recalled>> {
    store
        .recall_sources(episode_id, h)?
        .iter()
        .map(|src| match form {
            RecallForm::Raw => Ok(Recalled::Raw(model.reflector().encode_context(&model.store, src)?)),
            RecallForm::Reflected => Ok(Recalled::Reflected(model.reflect_context(src, query.0, query.1)?)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn emb(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
        Embedding((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
    }

    fn sample(rng: &mut ChaCha8Rng, i: usize) -> TransitionSample {
        TransitionSample {
            state_before: WorldState::from_pairs([(Modality::Image, emb(rng, 4))]).unwrap(),
            action: ActionDesc::new(format!("a{i}"), emb(rng, 4)).unwrap(),
            state_after: WorldState::from_pairs([(Modality::Image, emb(rng, 4))]).unwrap(),
            scenario: "kitchen".into(),
            episode_id: format!("ep{i}"),
            step_index: 0,
        }
    }

    fn kb(n: usize, seed: u64) -> KnowledgeBase {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        kb_build(&(0..n).map(|i| sample(&mut rng, i)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn build_counts_and_determinism() {
        let a = kb(50, 1);
        assert_eq!(a.len(), 50);
        assert_eq!(a, kb(50, 1));
        assert_eq!(a.scenario.as_deref(), Some("kitchen"));
        assert!(kb_build(&[]).unwrap().is_empty());
    }

    #[test]
    fn zero_sample_reports_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = vec![sample(&mut rng, 0), sample(&mut rng, 1)];
        s[1].action.embedding = Embedding::zeros(4);
        assert!(matches!(kb_build(&s), Err(Error::SampleEncoding { index: 1, .. })));
    }

    #[test]
    fn self_retrieval_and_clamp() {
        let k = kb(50, 3);
        let s = &k.entries[17].sample;
        let hits = kb_retrieve(&k, &s.state_before, &s.action, 1).unwrap();
        assert_eq!(hits[0].0, s);
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
        assert_eq!(kb_retrieve(&k, &s.state_before, &s.action, 100).unwrap().len(), 50);
        assert!(matches!(
            kb_retrieve(&KnowledgeBase::default(), &s.state_before, &s.action, 1),
            Err(Error::EmptyKnowledgeBase)
        ));
    }

    fn brute(kb: &KnowledgeBase, q: &Embedding, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..kb.len()).collect();
        let sims: Vec<f64> = kb.entries.iter().map(|e| cosine_similarity(&e.key, q).unwrap()).collect();
        // selection by repeated maximum, first index wins ties
        let mut out = Vec::new();
        while out.len() < k.min(kb.len()) {
            let mut best = None::<usize>;
            for &i in &idx {
                if best.is_none_or(|b| sims[i] > sims[b]) {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            idx.retain(|&i| i != b);
            out.push(b);
        }
        out
    }

    #[test]
    fn matches_brute_force() {
        let k = kb(200, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let s = WorldState::from_pairs([(Modality::Image, emb(&mut rng, 4))]).unwrap();
            let a = ActionDesc::new("q", emb(&mut rng, 4)).unwrap();
            let q = encode_query(&s, &a).unwrap();
            let got = ExactScan.top_k(&k, &q, 5).unwrap();
            assert_eq!(got.iter().map(|x| x.0).collect::<Vec<_>>(), brute(&k, &q, 5));
        }
    }

    #[test]
    fn ties_by_insertion_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = sample(&mut rng, 0);
        let mut t = s.clone();
        t.episode_id = "other".into();
        let k = kb_build(&[s.clone(), t, s.clone()]).unwrap();
        let hits = ExactScan.top_k(&k, &unified_encode(&s).unwrap(), 3).unwrap();
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn retrieval_exact_and_monotone(n in 1usize..60, k in 1usize..70, seed in 0u64..500) {
            let base = kb(n, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let q = crate::types::normalize(&emb(&mut rng, 8)).unwrap();
            let got = ExactScan.top_k(&base, &q, k).unwrap();
            prop_assert_eq!(got.iter().map(|x| x.0).collect::<Vec<_>>(), brute(&base, &q, k));
            prop_assert!(got.windows(2).all(|w| w[0].1 >= w[1].1));
        }
    }

    #[test]
    fn kb_export_round_trip() {
        let k = kb(10, 7);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("kb.jsonl");
        k.save(&p).unwrap();
        assert_eq!(KnowledgeBase::load(&p).unwrap(), k);
    }

    fn entry(rng: &mut ChaCha8Rng, step: u64) -> MemoryEntry {
        MemoryEntry {
            step_index: step,
            state: WorldState::from_pairs([(Modality::Video, emb(rng, 4))]).unwrap(),
            action: ActionDesc::new("a", emb(rng, 4)).unwrap(),
            prediction: None,
            ground_truth: None,
        }
    }

    #[test]
    fn memory_order_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = MemoryStore::new();
        for s in 0..3 {
            m.append("a", entry(&mut rng, s)).unwrap();
        }
        assert_eq!(m.len("a"), 3);
        assert_eq!(m.entries("a").unwrap().iter().map(|e| e.step_index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(matches!(m.append("a", entry(&mut rng, 1)), Err(Error::NonMonotonicStep { .. })));
        assert!(matches!(m.recent("zzz", 1), Err(Error::UnknownEpisode(_))));
        assert!(m.recent("a", 0).unwrap().is_empty());
        assert_eq!(m.recent("a", 5).unwrap().len(), 3);
        assert_eq!(m.recent("a", 2).unwrap()[0].step_index, 1);
    }

    #[test]
    fn memory_isolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = MemoryStore::new();
        m.append("a", entry(&mut rng, 0)).unwrap();
        m.append("b", entry(&mut rng, 0)).unwrap();
        let before = m.entries("a").unwrap().to_vec();
        m.append("b", entry(&mut rng, 1)).unwrap();
        m.append("b", entry(&mut rng, 5)).unwrap();
        assert_eq!(m.entries("a").unwrap(), before.as_slice());
    }

    #[test]
    fn recall_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = WorldModel::new(ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_enc: 4,
            k_sig: 2,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut m = MemoryStore::new();
        let mut e = entry(&mut rng, 0);
        e.ground_truth = Some(WorldState::from_pairs([(Modality::Audio, emb(&mut rng, 4))]).unwrap());
        e.prediction = Some([(Modality::Audio, emb(&mut rng, 4)), (Modality::Image, emb(&mut rng, 4))].into());
        let src = e.context_source().unwrap();
        // ground truth wins over the prediction for audio
        assert_eq!(src.rows.len(), 4);
        assert_eq!(&src.rows[3].1, e.ground_truth.as_ref().unwrap().get(Modality::Audio).unwrap());
        m.append("x", e.clone()).unwrap();
        m.append("x", entry(&mut rng, 1)).unwrap();
        let q = (&e.state, &e.action);
        let raw = memory_recall(&m, "x", 5, RecallForm::Raw, &model, q).unwrap();
        assert_eq!(raw.len(), 2);
        assert!(matches!(&raw[0], Recalled::Raw(x) if x.rows == 4));
        let refl = memory_recall(&m, "x", 1, RecallForm::Reflected, &model, q).unwrap();
        assert!(matches!(&refl[0], Recalled::Reflected(t) if t.len() == 4));
        assert!(memory_recall(&m, "x", 0, RecallForm::Raw, &model, q).unwrap().is_empty());
    }
}
