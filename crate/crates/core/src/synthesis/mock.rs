//! Deterministic offline provider: template instructions over a world's
//! start descriptions and action bank, and rule-based plan extraction.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::provider::{ProviderClient, ProviderRequest};
use super::rouge::rouge_l;
use super::{ExtractionPlan, PlanPattern, EXTRACT_HEADER, PROPOSE_HEADER};
use crate::error::{Error, Result};
use crate::synthworld::WorldSpec;
use crate::types::Modality;

const OPENERS: [&str; 6] = ["", "you see ", "there is ", "picture ", "start with ", "imagine "];
const CONNECTORS: [&str; 6] = ["then", "next", "after that", "now", "finally", "afterwards"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarScenario {
    pub name: String,
    pub starts: Vec<String>,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockGrammar {
    pub scenarios: Vec<GrammarScenario>,
    pub max_actions: usize,
    /// Share of instructions that are a bare scene description.
    pub description_rate: f64,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl MockGrammar {
    pub fn from_world(spec: &WorldSpec) -> Result<Self> {
        let scenarios = spec
            .scenarios
            .iter()
            .map(|s| {
                Ok(GrammarScenario {
                    name: s.name.clone(),
                    starts: s.start_states.iter().map(|st| st.description.clone()).collect(),
                    actions: s.actions.iter().map(|a| Ok(spec.action(a)?.text.clone())).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if scenarios.iter().any(|s| s.starts.is_empty() || s.actions.is_empty()) {
            return Err(Error::InvalidConfig("every scenario needs start states and actions".into()));
        }
        Ok(MockGrammar {
            scenarios,
            max_actions: 4,
            description_rate: 0.15,
        })
    }

    pub fn instruction(&self, rng: &mut impl Rng) -> String {
        let sc = self.scenarios.choose(rng).expect("non-empty grammar");
        let start = sc.starts.choose(rng).expect("non-empty");
        let opener = OPENERS.choose(rng).expect("non-empty");
        let mut s = format!("{}.", capitalize(&format!("{opener}{start}")));
        if rng.random_bool(self.description_rate) {
            return s;
        }
        let n = rng.random_range(1..=self.max_actions.max(1));
        for _ in 0..n {
            let conn = CONNECTORS.choose(rng).expect("non-empty");
            let act = sc.actions.choose(rng).expect("non-empty");
            s.push_str(&format!(" {} {act}.", capitalize(conn)));
        }
        s
    }

    /// `n` instructions, each with ROUGE-L at most `threshold` against all earlier ones.
    pub fn seed_instructions(&self, n: usize, seed: u64, threshold: f64) -> Result<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out: Vec<String> = Vec::with_capacity(n);
        let mut tries = 0;
        while out.len() < n {
            tries += 1;
            if tries > 1000 * n.max(1) {
                return Err(Error::InvalidConfig(format!("grammar cannot produce {n} distinct seed instructions")));
            }
            let cand = self.instruction(&mut rng);
            if out.iter().all(|o| rouge_l(&cand, o) <= threshold) {
                out.push(cand);
            }
        }
        Ok(out)
    }
}

fn strip_connector(sentence: &str) -> &str {
    let mut s = sentence.trim();
    if let Some(rest) = s.strip_prefix("Step ").or_else(|| s.strip_prefix("step ")) {
        if let Some((_, after)) = rest.split_once(':') {
            s = after.trim();
        }
    }
    let lower = s.to_lowercase();
    for c in CONNECTORS {
        if lower.starts_with(c) && lower[c.len()..].starts_with([' ', ',']) {
            return s[c.len()..].trim_start_matches([' ', ',']);
        }
    }
    s
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Rule set: first sentence is the initial state, every later sentence is one action.
pub fn rule_extract(text: &str) -> Result<ExtractionPlan> {
    let sentences: Vec<&str> = text
        .split(['.', ';', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    let Some((first, rest)) = sentences.split_first() else {
        return Err(Error::UnparseablePlan("empty instruction".into()));
    };
    let actions: Vec<String> = rest.iter().map(|s| lower_first(strip_connector(s))).filter(|s| !s.is_empty()).collect();
    let initial = strip_connector(first).to_string();
    let pattern = if actions.is_empty() {
        PlanPattern::DescriptionConditioned
    } else {
        PlanPattern::TransitionConditioned
    };
    Ok(ExtractionPlan {
        pattern,
        initial_state_text: initial,
        requested: vec![Modality::STATE.into(); actions.len() + 1],
        actions,
    })
}

/// Exemplar `(id, text)` lines of a proposal prompt.
pub fn parse_exemplars(prompt: &str) -> Vec<(String, String)> {
    prompt
        .lines()
        .filter_map(|l| {
            let rest = l.strip_prefix('[')?;
            let (id, text) = rest.split_once("] ")?;
            Some((id.to_string(), text.to_string()))
        })
        .collect()
}

/// Pure function of `(seed, request hash)`.
#[derive(Debug, Clone)]
pub struct MockProvider {
    pub seed: u64,
    pub grammar: MockGrammar,
    /// Chance that a proposal returns a light edit of one exemplar.
    pub paraphrase_rate: f64,
}

impl MockProvider {
    pub fn new(seed: u64, grammar: MockGrammar) -> Self {
        MockProvider {
            seed,
            grammar,
            paraphrase_rate: 0.15,
        }
    }

    fn rng_for(&self, req: &ProviderRequest) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(req.hash().as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn paraphrase(text: &str, rng: &mut impl Rng) -> String {
        let words: Vec<&str> = text.split(' ').collect();
        let conn_idx: Vec<usize> = (0..words.len())
            .filter(|&i| CONNECTORS.iter().any(|c| c.eq_ignore_ascii_case(words[i])))
            .collect();
        match conn_idx.choose(rng) {
            Some(&i) => {
                let mut w: Vec<String> = words.iter().map(|s| s.to_string()).collect();
                let alt = CONNECTORS
                    .iter()
                    .filter(|c| !c.contains(' ') && !c.eq_ignore_ascii_case(words[i]))
                    .collect::<Vec<_>>();
                w[i] = capitalize(alt.choose(rng).expect("non-empty"));
                w.join(" ")
            }
            None => format!("{} Then wait.", text),
        }
    }
}

impl ProviderClient for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, req: &ProviderRequest) -> Result<String> {
        let mut rng = self.rng_for(req);
        if let Some(rest) = req.prompt.strip_prefix(EXTRACT_HEADER) {
            let text = rest
                .lines()
                .find_map(|l| l.strip_prefix("Instruction: "))
                .ok_or_else(|| Error::Provider {
                    request_hash: req.hash(),
                    message: "extraction prompt without instruction".into(),
                })?;
            let plan = rule_extract(text)?;
            return Ok(serde_json::to_string(&super::PlanWire::from(&plan))?);
        }
        if req.prompt.starts_with(PROPOSE_HEADER) {
            let ex = parse_exemplars(&req.prompt);
            if !ex.is_empty() && rng.random_bool(self.paraphrase_rate) {
                let (_, text) = ex.choose(&mut rng).expect("non-empty");
                return Ok(Self::paraphrase(text, &mut rng));
            }
            return Ok(self.grammar.instruction(&mut rng));
        }
        Err(Error::Provider {
            request_hash: req.hash(),
            message: "mock provider does not recognize the prompt".into(),
        })
    }
}
