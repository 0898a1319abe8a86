//! Conditional-query cross-attention that compresses one retrieved context
//! into a fixed number of context tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Component, ParamId, ParamStore};
use crate::tensor::{Graph, Mask, Matrix, Var};
use crate::types::{condition_vector, ActionDesc, Embedding, Modality, TransitionSample, WorldState};

/// Role of one context row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Before(Modality),
    Action,
    After(Modality),
}

impl Slot {
    pub const ALL: [Slot; 7] = [
        Slot::Before(Modality::Image),
        Slot::Before(Modality::Video),
        Slot::Before(Modality::Audio),
        Slot::Action,
        Slot::After(Modality::Image),
        Slot::After(Modality::Video),
        Slot::After(Modality::Audio),
    ];

    pub fn index(self) -> usize {
        Slot::ALL.iter().position(|s| *s == self).expect("slot listed")
    }

    pub fn name(self) -> String {
        match self {
            Slot::Before(m) => format!("before_{}", m.name()),
            Slot::Action => "action".into(),
            Slot::After(m) => format!("after_{}", m.name()),
        }
    }
}

/// Raw rows of one context in canonical order: before-state modalities,
/// the action, after-state modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSource {
    pub rows: Vec<(Slot, Embedding)>,
}

impl ContextSource {
    pub fn new(before: &WorldState, action: &ActionDesc, after: Option<&WorldState>) -> Result<Self> {
        let mut rows = Vec::new();
        for (m, e) in before.modalities() {
            rows.push((Slot::Before(*m), e.clone()));
        }
        rows.push((Slot::Action, action.embedding.clone()));
        if let Some(after) = after {
            for (m, e) in after.modalities() {
                rows.push((Slot::After(*m), e.clone()));
            }
        }
        let d = before.dim();
        if let Some((_, e)) = rows.iter().find(|(_, e)| e.dim() != d) {
            return Err(Error::dim("context row", d, e.dim()));
        }
        if rows.iter().any(|(s, _)| matches!(s, Slot::Before(Modality::Text) | Slot::After(Modality::Text))) {
            return Err(Error::UnknownModality(Modality::Text));
        }
        Ok(ContextSource { rows })
    }

    pub fn from_sample(s: &TransitionSample) -> Result<Self> {
        ContextSource::new(&s.state_before, &s.action, Some(&s.state_after))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Deterministic condition vector (`2·d_enc`) for the current query.
pub fn encode_condition(state: &WorldState, action: &ActionDesc) -> Result<Embedding> {
    condition_vector(state, action)
}

#[derive(Debug, Clone)]
struct ReflectorLayer {
    norm_q: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    norm_m: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Reflector {
    lift_w: Vec<ParamId>,
    lift_b: Vec<ParamId>,
    queries: ParamId,
    cond_w: ParamId,
    cond_b: ParamId,
    layers: Vec<ReflectorLayer>,
    out_w: ParamId,
    out_b: ParamId,
    d_enc: usize,
    d_q: usize,
    n_queries: usize,
}

impl Reflector {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = Component::Reflector;
        let (de, dq) = (cfg.d_enc, cfg.d_q());
        for s in Slot::ALL {
            store.add_normal(format!("refl.lift.{}.w", s.name()), c, de, dq, (de as f64).powf(-0.5), rng);
            store.add_const(format!("refl.lift.{}.b", s.name()), c, 1, dq, 0.0);
        }
        store.add_normal("refl.queries", c, cfg.n_queries, dq, 1.0, rng);
        store.add_normal("refl.cond.w", c, 2 * de, dq, (2.0 * de as f64).powf(-0.5), rng);
        store.add_const("refl.cond.b", c, 1, dq, 0.0);
        let h = cfg.mlp_ratio * dq;
        for l in 0..cfg.n_reflector_layers {
            let p = format!("refl.l{l}");
            store.add_const(format!("{p}.norm_q"), c, 1, dq, 1.0);
            for w in ["wq", "wk", "wv"] {
                store.add_normal(format!("{p}.{w}"), c, dq, dq, (dq as f64).powf(-0.5), rng);
            }
            store.add_normal(format!("{p}.wo"), c, dq, dq, 0.5 * (dq as f64).powf(-0.5), rng);
            store.add_const(format!("{p}.norm_m"), c, 1, dq, 1.0);
            store.add_normal(format!("{p}.w1"), c, dq, h, (dq as f64).powf(-0.5), rng);
            store.add_const(format!("{p}.b1"), c, 1, h, 0.0);
            store.add_normal(format!("{p}.w2"), c, h, dq, 0.5 * (h as f64).powf(-0.5), rng);
            store.add_const(format!("{p}.b2"), c, 1, dq, 0.0);
        }
        store.add_normal("refl.out.w", c, dq, cfg.d_model, 0.5 * (dq as f64).powf(-0.5), rng);
        store.add_const("refl.out.b", c, 1, cfg.d_model, 0.0);
        Reflector::bind(store, cfg)
    }

    pub fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let get = |n: &str| store.id(n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")));
        let layers = (0..cfg.n_reflector_layers)
            .map(|l| {
                let p = format!("refl.l{l}");
                Ok(ReflectorLayer {
                    norm_q: get(&format!("{p}.norm_q"))?,
                    wq: get(&format!("{p}.wq"))?,
                    wk: get(&format!("{p}.wk"))?,
                    wv: get(&format!("{p}.wv"))?,
                    wo: get(&format!("{p}.wo"))?,
                    norm_m: get(&format!("{p}.norm_m"))?,
                    w1: get(&format!("{p}.w1"))?,
                    b1: get(&format!("{p}.b1"))?,
                    w2: get(&format!("{p}.w2"))?,
                    b2: get(&format!("{p}.b2"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Reflector {
            lift_w: Slot::ALL.iter().map(|s| get(&format!("refl.lift.{}.w", s.name()))).collect::<Result<_>>()?,
            lift_b: Slot::ALL.iter().map(|s| get(&format!("refl.lift.{}.b", s.name()))).collect::<Result<_>>()?,
            queries: get("refl.queries")?,
            cond_w: get("refl.cond.w")?,
            cond_b: get("refl.cond.b")?,
            layers,
            out_w: get("refl.out.w")?,
            out_b: get("refl.out.b")?,
            d_enc: cfg.d_enc,
            d_q: cfg.d_q(),
            n_queries: cfg.n_queries,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    /// Lift each raw row to `d_q` with its slot's affine map.
    pub fn context_graph(&self, g: &mut Graph, src: &ContextSource) -> Result<Var> {
        if src.is_empty() {
            return Err(Error::EmptySet);
        }
        let mut rows = Vec::with_capacity(src.len());
        for (slot, e) in &src.rows {
            if e.dim() != self.d_enc {
                return Err(Error::dim("context row", self.d_enc, e.dim()));
            }
            let x = g.constant(Matrix::row_vector(e.0.clone()));
            let w = g.param(self.lift_w[slot.index()]);
            let b = g.param(self.lift_b[slot.index()]);
            let y = g.matmul(x, w);
            rows.push(g.add_row(y, b));
        }
        Ok(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) })
    }

    /// `n_queries × d_model` context tokens.
    pub fn reflect_graph(&self, g: &mut Graph, context: Var, condition: &Embedding) -> Result<Var> {
        let (_, c) = g.shape(context);
        if c != self.d_q {
            return Err(Error::dim("context width", self.d_q, c));
        }
        if condition.dim() != 2 * self.d_enc {
            return Err(Error::dim("condition", 2 * self.d_enc, condition.dim()));
        }
        let cond = g.constant(Matrix::row_vector(condition.0.clone()));
        let (cw, cb) = (g.param(self.cond_w), g.param(self.cond_b));
        let pc = g.matmul(cond, cw);
        let pc = g.add_row(pc, cb);
        let q0 = g.param(self.queries);
        let mut q = g.add_row(q0, pc);
        let scale = 1.0 / (self.d_q as f64).sqrt();
        for l in &self.layers {
            let nq = g.param(l.norm_q);
            let h = g.rms_norm(q, nq);
            let (wq, wk, wv, wo) = (g.param(l.wq), g.param(l.wk), g.param(l.wv), g.param(l.wo));
            let qq = g.matmul(h, wq);
            let kk = g.matmul(context, wk);
            let vv = g.matmul(context, wv);
            let s = g.matmul_t(qq, kk);
            let s = g.scale(s, scale);
            let p = g.softmax(s, Mask::None);
            let a = g.matmul(p, vv);
            let a = g.matmul(a, wo);
            q = g.add(q, a);
            let nm = g.param(l.norm_m);
            let h = g.rms_norm(q, nm);
            let (w1, b1, w2, b2) = (g.param(l.w1), g.param(l.b1), g.param(l.w2), g.param(l.b2));
            let h = g.matmul(h, w1);
            let h = g.add_row(h, b1);
            let h = g.gelu(h);
            let h = g.matmul(h, w2);
            let h = g.add_row(h, b2);
            q = g.add(q, h);
        }
        let (ow, ob) = (g.param(self.out_w), g.param(self.out_b));
        let y = g.matmul(q, ow);
        Ok(g.add_row(y, ob))
    }

    /// Pure lifted context matrix (`n_ctx × d_q`).
    pub fn encode_context(&self, store: &ParamStore, src: &ContextSource) -> Result<Matrix> {
        let none = |_| false;
        let mut g = Graph::with_tracking(store, &none);
        let v = self.context_graph(&mut g, src)?;
        Ok(g.value(v).clone())
    }

    /// Pure reflection of a lifted context matrix.
    pub fn reflect(&self, store: &ParamStore, context: &Matrix, condition: &Embedding) -> Result<Matrix> {
        if context.rows == 0 {
            return Err(Error::EmptySet);
        }
        let none = |_| false;
        let mut g = Graph::with_tracking(store, &none);
        let c = g.constant(context.clone());
        let y = self.reflect_graph(&mut g, c, condition)?;
        Ok(g.value(y).clone())
    }
}
