//! Small causal transformer over framed token streams, with low-rank adapters
//! on the attention projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framing::{locate_signal_spans, Spans, Token, TokenStream, N_TEXT_SYMBOLS};
use crate::params::{Component, ParamId, ParamStore};
use crate::tensor::{Graph, Mask, Matrix, Var};
use crate::types::Modality;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub k_sig: usize,
    pub d_enc: usize,
    pub adapter_rank: usize,
    /// Adapter output is scaled by `adapter_alpha / adapter_rank`.
    pub adapter_alpha: f64,
    /// Also attach adapters to the MLP projections.
    pub adapter_mlp: bool,
    pub mlp_ratio: usize,
    pub max_positions: usize,
    pub n_text_symbols: usize,
    pub n_queries: usize,
    /// Reflector width; 0 means `d_model`.
    pub d_q: usize,
    pub n_reflector_layers: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 48,
            n_layers: 2,
            n_heads: 4,
            k_sig: 4,
            d_enc: 64,
            adapter_rank: 4,
            adapter_alpha: 4.0,
            adapter_mlp: false,
            mlp_ratio: 4,
            max_positions: 64,
            n_text_symbols: N_TEXT_SYMBOLS,
            n_queries: 4,
            d_q: 0,
            n_reflector_layers: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_enc == 0 {
            return bad("model sizes must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.adapter_rank == 0 {
            return bad("adapter_rank must be >= 1");
        }
        if self.k_sig == 0 || self.n_queries == 0 || self.n_reflector_layers == 0 {
            return bad("k_sig, n_queries and n_reflector_layers must be >= 1");
        }
        if self.mlp_ratio == 0 || self.max_positions == 0 || self.n_text_symbols == 0 {
            return bad("mlp_ratio, max_positions and n_text_symbols must be >= 1");
        }
        Ok(())
    }

    pub fn d_q(&self) -> usize {
        if self.d_q == 0 {
            self.d_model
        } else {
            self.d_q
        }
    }

    pub fn adapter_scale(&self) -> f64 {
        self.adapter_alpha / self.adapter_rank as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    /// Low-rank pair `(A: in×r, B: r×out)`.
    pub lora: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub norm1: ParamId,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm2: ParamId,
    pub w1: Linear,
    pub b1: ParamId,
    pub w2: Linear,
    pub b2: ParamId,
}

/// Parameter handles of the backbone.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub text: ParamId,
    /// Rows `2·m` and `2·m+1` are the open and close tokens of modality `m`.
    pub delim: ParamId,
    /// Row `m·k_sig + i` is `Signal(m, i)`.
    pub signal: ParamId,
    pub pos: ParamId,
    pub input_w: Vec<ParamId>,
    pub input_b: Vec<ParamId>,
    pub layers: Vec<Layer>,
    pub norm_f: ParamId,
    d_model: usize,
    n_heads: usize,
    k_sig: usize,
    d_enc: usize,
    max_positions: usize,
    adapter_scale: f64,
}

const LINEARS: [&str; 6] = ["wq", "wk", "wv", "wo", "w1", "w2"];

impl Backbone {
    /// Register fresh parameters in `store`.
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let base = Component::Base;
        store.add_normal("bb.text", base, cfg.n_text_symbols, d, 0.5, rng);
        store.add_normal("bb.delim", base, 8, d, 0.5, rng);
        store.add_normal("bb.signal", base, 4 * cfg.k_sig, d, 0.5, rng);
        store.add_normal("bb.pos", base, cfg.max_positions, d, 0.1, rng);
        for m in Modality::ALL {
            store.add_normal(format!("bb.in.{}.w", m.name()), base, cfg.d_enc, d, (cfg.d_enc as f64).powf(-0.5), rng);
            store.add_const(format!("bb.in.{}.b", m.name()), base, 1, d, 0.0);
        }
        let h = cfg.mlp_ratio * d;
        let out_std = (d as f64).powf(-0.5) / (2.0 * cfg.n_layers as f64).sqrt();
        for l in 0..cfg.n_layers {
            let p = format!("bb.l{l}");
            store.add_const(format!("{p}.norm1"), base, 1, d, 1.0);
            for w in ["wq", "wk", "wv"] {
                store.add_normal(format!("{p}.{w}"), base, d, d, (d as f64).powf(-0.5), rng);
            }
            store.add_normal(format!("{p}.wo"), base, d, d, out_std, rng);
            store.add_const(format!("{p}.norm2"), base, 1, d, 1.0);
            store.add_normal(format!("{p}.w1"), base, d, h, (d as f64).powf(-0.5), rng);
            store.add_const(format!("{p}.b1"), base, 1, h, 0.0);
            store.add_normal(format!("{p}.w2"), base, h, d, (h as f64).powf(-0.5) / (2.0 * cfg.n_layers as f64).sqrt(), rng);
            store.add_const(format!("{p}.b2"), base, 1, d, 0.0);
            for w in LINEARS {
                if matches!(w, "w1" | "w2") && !cfg.adapter_mlp {
                    continue;
                }
                let (din, dout) = match w {
                    "w1" => (d, h),
                    "w2" => (h, d),
                    _ => (d, d),
                };
                let r = cfg.adapter_rank;
                store.add_normal(format!("{p}.{w}.lora_a"), Component::Adapters, din, r, (din as f64).powf(-0.5), rng);
                store.add_const(format!("{p}.{w}.lora_b"), Component::Adapters, r, dout, 0.0);
            }
        }
        store.add_const("bb.norm_f", base, 1, d, 1.0);
        Backbone::bind(store, cfg)
    }

    /// Look up existing parameters by name.
    pub fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let get = |n: &str| store.id(n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")));
        let lin = |p: &str, w: &str| -> Result<Linear> {
            Ok(Linear {
                w: get(&format!("{p}.{w}"))?,
                lora: match (store.id(&format!("{p}.{w}.lora_a")), store.id(&format!("{p}.{w}.lora_b"))) {
                    (Some(a), Some(b)) => Some((a, b)),
                    _ => None,
                },
            })
        };
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let p = format!("bb.l{l}");
            layers.push(Layer {
                norm1: get(&format!("{p}.norm1"))?,
                wq: lin(&p, "wq")?,
                wk: lin(&p, "wk")?,
                wv: lin(&p, "wv")?,
                wo: lin(&p, "wo")?,
                norm2: get(&format!("{p}.norm2"))?,
                w1: lin(&p, "w1")?,
                b1: get(&format!("{p}.b1"))?,
                w2: lin(&p, "w2")?,
                b2: get(&format!("{p}.b2"))?,
            });
        }
        Ok(Backbone {
            text: get("bb.text")?,
            delim: get("bb.delim")?,
            signal: get("bb.signal")?,
            pos: get("bb.pos")?,
            input_w: Modality::ALL.iter().map(|m| get(&format!("bb.in.{}.w", m.name()))).collect::<Result<_>>()?,
            input_b: Modality::ALL.iter().map(|m| get(&format!("bb.in.{}.b", m.name()))).collect::<Result<_>>()?,
            layers,
            norm_f: get("bb.norm_f")?,
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            k_sig: cfg.k_sig,
            d_enc: cfg.d_enc,
            max_positions: cfg.max_positions,
            adapter_scale: cfg.adapter_scale(),
        })
    }

    fn linear(&self, g: &mut Graph, x: Var, lin: Linear, adapters: bool) -> Var {
        let w = g.param(lin.w);
        let y = g.matmul(x, w);
        match lin.lora {
            Some((a, b)) if adapters => {
                let (a, b) = (g.param(a), g.param(b));
                let xa = g.matmul(x, a);
                let xab = g.matmul(xa, b);
                let s = g.scale(xab, self.adapter_scale);
                g.add(y, s)
            }
            _ => y,
        }
    }

    /// Input matrix for a stream. Context rows come from `ctx` when given,
    /// otherwise from the stream's own context tokens.
    pub fn embed(&self, g: &mut Graph, stream: &TokenStream, ctx: Option<Var>) -> Result<Var> {
        let n_ctx = stream.n_context();
        let body = &stream.tokens[n_ctx..];
        if body.len() > self.max_positions {
            return Err(Error::dim("stream length (max_positions)", self.max_positions, body.len()));
        }
        let d = self.d_model;
        let mut rows = Vec::with_capacity(stream.len());
        if n_ctx > 0 {
            match ctx {
                Some(v) => {
                    let (r, c) = g.shape(v);
                    if r != n_ctx {
                        return Err(Error::dim("context rows", n_ctx, r));
                    }
                    if c != d {
                        return Err(Error::dim("context width", d, c));
                    }
                    rows.push(v);
                }
                None => {
                    let mut data = Vec::with_capacity(n_ctx * d);
                    for t in &stream.tokens[..n_ctx] {
                        let Token::Context(v) = t else { unreachable!() };
                        if v.len() != d {
                            return Err(Error::dim("context width", d, v.len()));
                        }
                        data.extend_from_slice(v);
                    }
                    rows.push(g.constant(Matrix::from_vec(n_ctx, d, data)));
                }
            }
        } else if let Some(v) = ctx {
            if g.shape(v).0 != 0 {
                return Err(Error::dim("context rows", 0, g.shape(v).0));
            }
        }
        let mut body_rows = Vec::with_capacity(body.len());
        for t in body {
            let v = match t {
                Token::Text(s) => {
                    let p = g.param(self.text);
                    if *s >= g.shape(p).0 {
                        return Err(Error::dim("text symbol", g.shape(p).0, *s));
                    }
                    g.slice_rows(p, *s, s + 1)
                }
                Token::Open(m) => {
                    let p = g.param(self.delim);
                    g.slice_rows(p, 2 * m.index(), 2 * m.index() + 1)
                }
                Token::Close(m) => {
                    let p = g.param(self.delim);
                    g.slice_rows(p, 2 * m.index() + 1, 2 * m.index() + 2)
                }
                Token::Payload(m, e) => {
                    if e.dim() != self.d_enc {
                        return Err(Error::dim("payload", self.d_enc, e.dim()));
                    }
                    let x = g.constant(Matrix::row_vector(e.0.clone()));
                    let w = g.param(self.input_w[m.index()]);
                    let b = g.param(self.input_b[m.index()]);
                    let y = g.matmul(x, w);
                    g.add_row(y, b)
                }
                Token::Signal(m, i) => {
                    if *i >= self.k_sig {
                        return Err(Error::dim("signal index", self.k_sig, *i));
                    }
                    let p = g.param(self.signal);
                    let r = m.index() * self.k_sig + i;
                    g.slice_rows(p, r, r + 1)
                }
                Token::Context(_) => return Err(Error::MalformedStream("context token after the prefix".into())),
            };
            body_rows.push(v);
        }
        let tok = g.concat_rows(&body_rows);
        let pos = g.param(self.pos);
        let pos = g.slice_rows(pos, 0, body.len());
        let body = g.add(tok, pos);
        rows.push(body);
        Ok(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) })
    }

    fn attention(&self, g: &mut Graph, x: Var, layer: &Layer, adapters: bool) -> Var {
        let q = self.linear(g, x, layer.wq, adapters);
        let k = self.linear(g, x, layer.wk, adapters);
        let v = self.linear(g, x, layer.wv, adapters);
        let dh = self.d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, s, e);
            let kh = g.slice_cols(k, s, e);
            let vh = g.slice_cols(v, s, e);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax(scores, Mask::Causal);
            heads.push(g.matmul(p, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.linear(g, cat, layer.wo, adapters)
    }

    /// Hidden states (`seq_len × d_model`).
    pub fn forward_graph(&self, g: &mut Graph, stream: &TokenStream, ctx: Option<Var>, adapters: bool) -> Result<Var> {
        let mut x = self.embed(g, stream, ctx)?;
        for layer in &self.layers {
            let n1 = g.param(layer.norm1);
            let h = g.rms_norm(x, n1);
            let a = self.attention(g, h, layer, adapters);
            x = g.add(x, a);
            let n2 = g.param(layer.norm2);
            let h = g.rms_norm(x, n2);
            let h = self.linear(g, h, layer.w1, adapters);
            let b1 = g.param(layer.b1);
            let h = g.add_row(h, b1);
            let h = g.gelu(h);
            let h = self.linear(g, h, layer.w2, adapters);
            let b2 = g.param(layer.b2);
            let h = g.add_row(h, b2);
            x = g.add(x, h);
        }
        let nf = g.param(self.norm_f);
        Ok(g.rms_norm(x, nf))
    }

    pub fn forward(&self, store: &ParamStore, stream: &TokenStream) -> Result<Matrix> {
        self.forward_with(store, stream, true)
    }

    /// Forward pass, optionally bypassing the adapters.
    pub fn forward_with(&self, store: &ParamStore, stream: &TokenStream, adapters: bool) -> Result<Matrix> {
        let none = |_| false;
        let mut g = Graph::with_tracking(store, &none);
        let h = self.forward_graph(&mut g, stream, None, adapters)?;
        Ok(g.value(h).clone())
    }

    /// Hidden rows at each requested modality's signal span.
    pub fn predict_transition(
        &self,
        store: &ParamStore,
        stream: &TokenStream,
    ) -> Result<std::collections::BTreeMap<Modality, Matrix>> {
        let spans = locate_signal_spans(stream)?;
        let hidden = self.forward(store, stream)?;
        Ok(slice_spans(&hidden, &spans))
    }
}

pub fn slice_spans(hidden: &Matrix, spans: &Spans) -> std::collections::BTreeMap<Modality, Matrix> {
    spans
        .iter()
        .map(|(m, &(s, e))| {
            (*m, Matrix::from_vec(e - s, hidden.cols, hidden.data[s * hidden.cols..e * hidden.cols].to_vec()))
        })
        .collect()
}
