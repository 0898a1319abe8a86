//! Token protocol: context tokens, delimited modality payloads, the action,
//! and signal tokens for each requested output modality.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::types::{ActionDesc, Embedding, Modality, WorldState};

/// Fixed text symbols.
pub const SYM_ACTION: usize = 0;
pub const N_TEXT_SYMBOLS: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Token {
    Text(usize),
    Open(Modality),
    Close(Modality),
    /// Embedding in the unified space, tagged with the enclosing modality.
    Payload(Modality, Embedding),
    /// Already in model space (`d_model`).
    Context(Vec<f64>),
    Signal(Modality, usize),
}

/// A block of context tokens, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTokens(pub Matrix);

impl ContextTokens {
    pub fn len(&self) -> usize {
        self.0.rows
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
    pub requested: BTreeSet<Modality>,
    pub k_sig: usize,
}

pub type Spans = BTreeMap<Modality, (usize, usize)>;

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_context(&self) -> usize {
        self.tokens.iter().take_while(|t| matches!(t, Token::Context(_))).count()
    }
}

/// Layout: context, then `Open Payload Close` per input modality in canonical
/// order, then the action, then `k_sig` signal tokens per requested modality.
pub fn frame_input(
    state: &WorldState,
    action: &ActionDesc,
    context: &[ContextTokens],
    requested: &BTreeSet<Modality>,
    k_sig: usize,
) -> Result<TokenStream> {
    if requested.is_empty() {
        return Err(Error::EmptyRequest);
    }
    if requested.contains(&Modality::Text) {
        return Err(Error::UnknownModality(Modality::Text));
    }
    if k_sig == 0 {
        return Err(Error::InvalidConfig("k_sig must be >= 1".into()));
    }
    let d_enc = state.dim();
    if action.embedding.dim() != d_enc {
        return Err(Error::dim("action embedding", d_enc, action.embedding.dim()));
    }
    let mut tokens = Vec::new();
    if let Some(first) = context.first() {
        let width = first.0.cols;
        for block in context {
            if block.0.cols != width {
                return Err(Error::dim("context token width", width, block.0.cols));
            }
            tokens.extend((0..block.0.rows).map(|r| Token::Context(block.0.row(r).to_vec())));
        }
    }
    for (m, e) in state.modalities() {
        tokens.push(Token::Open(*m));
        tokens.push(Token::Payload(*m, e.clone()));
        tokens.push(Token::Close(*m));
    }
    tokens.push(Token::Text(SYM_ACTION));
    tokens.push(Token::Open(Modality::Text));
    tokens.push(Token::Payload(Modality::Text, action.embedding.clone()));
    tokens.push(Token::Close(Modality::Text));
    for m in requested {
        tokens.extend((0..k_sig).map(|i| Token::Signal(*m, i)));
    }
    Ok(TokenStream {
        tokens,
        requested: requested.clone(),
        k_sig,
    })
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedStream(msg.into())
}

/// Checks every stream invariant and returns the signal span per requested modality.
pub fn locate_signal_spans(stream: &TokenStream) -> Result<Spans> {
    let toks = &stream.tokens;
    let n_ctx = stream.n_context();
    if toks[n_ctx..].iter().any(|t| matches!(t, Token::Context(_))) {
        return Err(malformed("context token after the prefix"));
    }
    let mut open: Option<Modality> = None;
    let mut spans = Spans::new();
    let mut i = n_ctx;
    while i < toks.len() {
        match &toks[i] {
            Token::Open(m) => {
                if open.is_some() {
                    return Err(malformed(format!("nested open at {i}")));
                }
                open = Some(*m);
            }
            Token::Close(m) => {
                if open != Some(*m) {
                    return Err(malformed(format!("unmatched close at {i}")));
                }
                open = None;
            }
            Token::Payload(m, _) => {
                if open != Some(*m) {
                    return Err(malformed(format!("payload outside its delimiters at {i}")));
                }
            }
            Token::Signal(m, idx) => {
                if open.is_some() {
                    return Err(malformed(format!("signal inside delimiters at {i}")));
                }
                if *idx != 0 {
                    return Err(malformed(format!("signal run for {m} starts at index {idx}")));
                }
                if spans.contains_key(m) {
                    return Err(malformed(format!("second signal run for {m}")));
                }
                let start = i;
                let mut expect = 0;
                while i < toks.len() {
                    match &toks[i] {
                        Token::Signal(m2, j) if m2 == m => {
                            if *j != expect {
                                return Err(malformed(format!("signal index gap for {m} at {i}")));
                            }
                            expect += 1;
                            i += 1;
                        }
                        _ => break,
                    }
                }
                if expect != stream.k_sig {
                    return Err(malformed(format!("{m} has {expect} signal tokens, expected {}", stream.k_sig)));
                }
                spans.insert(*m, (start, i));
                continue;
            }
            Token::Text(_) | Token::Context(_) => {}
        }
        i += 1;
    }
    if open.is_some() {
        return Err(malformed("unclosed delimiter"));
    }
    if spans.keys().copied().collect::<BTreeSet<_>>() != stream.requested {
        return Err(malformed("signal runs do not match the requested outputs"));
    }
    Ok(spans)
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Text(SYM_ACTION) => f.write_str("<ACT>"),
            Token::Text(s) => write!(f, "<SYM{s}>"),
            Token::Open(m) => write!(f, "<{}>", m.tag()),
            Token::Close(m) => write!(f, "</{}>", m.tag()),
            Token::Payload(_, e) => write!(f, "[{}-d embedding]", e.dim()),
            Token::Context(_) => f.write_str("<CTX>"),
            Token::Signal(m, i) => write!(f, "<{}{}>", m.tag(), i + 1),
        }
    }
}

impl fmt::Display for TokenStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(v: f64, d: usize) -> Embedding {
        Embedding((0..d).map(|i| v + i as f64 * 0.01).collect())
    }

    fn state(mods: &[Modality]) -> WorldState {
        WorldState::from_pairs(mods.iter().map(|m| (*m, e(m.index() as f64 + 1.0, 4)))).unwrap()
    }

    fn act() -> ActionDesc {
        ActionDesc::new("stir", e(0.5, 4)).unwrap()
    }

    fn req(mods: &[Modality]) -> BTreeSet<Modality> {
        mods.iter().copied().collect()
    }

    #[test]
    fn video_audio_to_image_layout() {
        let s = frame_input(&state(&[Modality::Audio, Modality::Video]), &act(), &[], &req(&[Modality::Image]), 4).unwrap();
        assert_eq!(
            s.to_string(),
            "<VID> [4-d embedding] </VID> <AUD> [4-d embedding] </AUD> <ACT> <TXT> [4-d embedding] </TXT> <IMG1> <IMG2> <IMG3> <IMG4>"
        );
        assert_eq!(s.tokens[0], Token::Open(Modality::Video));
        assert_eq!(s.tokens[3], Token::Open(Modality::Audio));
    }

    #[test]
    fn empty_request() {
        assert!(matches!(
            frame_input(&state(&[Modality::Image]), &act(), &[], &BTreeSet::new(), 4),
            Err(Error::EmptyRequest)
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let a = ActionDesc::new("x", e(0.1, 3)).unwrap();
        assert!(matches!(
            frame_input(&state(&[Modality::Image]), &a, &[], &req(&[Modality::Image]), 4),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn two_context_blocks_lead() {
        let block = ContextTokens(Matrix::zeros(4, 8));
        let s = frame_input(&state(&[Modality::Image]), &act(), &[block.clone(), block], &req(&[Modality::Image]), 4).unwrap();
        assert!(s.tokens[..8].iter().all(|t| matches!(t, Token::Context(_))));
        assert!(!matches!(s.tokens[8], Token::Context(_)));
        assert_eq!(s.n_context(), 8);
    }

    #[test]
    fn spans_disjoint_width_ksig() {
        let s = frame_input(&state(&[Modality::Video]), &act(), &[], &req(&[Modality::Image, Modality::Audio]), 3).unwrap();
        let spans = locate_signal_spans(&s).unwrap();
        assert_eq!(spans.len(), 2);
        let (a, b) = (spans[&Modality::Image], spans[&Modality::Audio]);
        assert_eq!(a.1 - a.0, 3);
        assert_eq!(b.1 - b.0, 3);
        assert!(a.1 <= b.0);
        let again = frame_input(&state(&[Modality::Video]), &act(), &[], &req(&[Modality::Image, Modality::Audio]), 3).unwrap();
        assert_eq!(locate_signal_spans(&again).unwrap(), spans);
    }

    #[test]
    fn gap_is_malformed() {
        let mut s = frame_input(&state(&[Modality::Image]), &act(), &[], &req(&[Modality::Image]), 4).unwrap();
        let last = s.tokens.len() - 2;
        s.tokens[last] = Token::Signal(Modality::Image, 3);
        assert!(matches!(locate_signal_spans(&s), Err(Error::MalformedStream(_))));
    }

    #[test]
    fn other_corruptions_are_malformed() {
        let base = frame_input(&state(&[Modality::Image]), &act(), &[], &req(&[Modality::Image]), 2).unwrap();
        let mut a = base.clone();
        a.tokens.remove(2); // drop a Close
        assert!(locate_signal_spans(&a).is_err());
        let mut b = base.clone();
        b.tokens.push(Token::Context(vec![0.0]));
        assert!(locate_signal_spans(&b).is_err());
        let mut c = base.clone();
        c.requested.insert(Modality::Audio);
        assert!(locate_signal_spans(&c).is_err());
        let mut d = base;
        d.tokens.swap(0, 1);
        assert!(locate_signal_spans(&d).is_err());
    }

    fn modset() -> impl Strategy<Value = BTreeSet<Modality>> {
        proptest::sample::subsequence(Modality::STATE.to_vec(), 1..=3).prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn round_trip_keys(inputs in modset(), outputs in modset(), n_ctx in 0usize..3, k in 1usize..5, seed in 0u64..1000) {
            let ins: Vec<Modality> = inputs.into_iter().collect();
            let st = WorldState::from_pairs(ins.iter().map(|m| (*m, e(seed as f64 + m.index() as f64, 5)))).unwrap();
            let a = ActionDesc::new("go", e(seed as f64 * 0.1, 5)).unwrap();
            let ctx: Vec<ContextTokens> = (0..n_ctx).map(|_| ContextTokens(Matrix::zeros(4, 6))).collect();
            let s = frame_input(&st, &a, &ctx, &outputs, k).unwrap();
            let spans = locate_signal_spans(&s).unwrap();
            prop_assert_eq!(spans.keys().copied().collect::<BTreeSet<_>>(), outputs.clone());
            let s2 = frame_input(&st, &a, &ctx, &outputs, k).unwrap();
            prop_assert_eq!(s, s2);
        }
    }
}
