//! The complete world model: backbone, signal heads, reflector and the fixed
//! context lift used by the raw in-context variants.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, ModelConfig};
use crate::decoder::{Heads, RenderMap, TargetSpace};
use crate::error::{Error, Result};
use crate::framing::{frame_input, locate_signal_spans, ContextTokens};
use crate::params::{Component, FreezePlan, ParamId, ParamStore};
use crate::reflector::{encode_condition, ContextSource, Reflector, Slot};
use crate::tensor::{Graph, Matrix, Var};
use crate::types::{ActionDesc, Embedding, Modality, WorldState};

/// How retrieved or remembered contexts enter the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextMode {
    /// Every raw row lifted by the fixed context lift becomes one token.
    Raw,
    /// Each context is reflected into `n_queries` tokens.
    Reflected,
}

#[derive(Debug, Clone, Copy)]
pub struct ContextInput<'a> {
    pub mode: ContextMode,
    pub sources: &'a [ContextSource],
}

impl<'a> ContextInput<'a> {
    pub fn new(mode: ContextMode, sources: &'a [ContextSource]) -> Self {
        ContextInput { mode, sources }
    }
}

#[derive(Debug, Clone)]
struct ContextLift {
    w: ParamId,
    slot: ParamId,
}

#[derive(Debug, Clone)]
pub struct WorldModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub render: RenderMap,
    pub freeze: FreezePlan,
    backbone: Backbone,
    heads: Heads,
    reflector: Reflector,
    lift: ContextLift,
}

impl WorldModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::default();
        Backbone::init(&mut store, &config, &mut rng)?;
        Heads::init(&mut store, &config, &mut rng)?;
        Reflector::init(&mut store, &config, &mut rng)?;
        let (de, d) = (config.d_enc, config.d_model);
        store.add_normal("lift.w", Component::ContextLift, de, d, (de as f64).powf(-0.5), &mut rng);
        store.add_normal("lift.slot", Component::ContextLift, Slot::ALL.len(), d, 0.5, &mut rng);
        let render = RenderMap::random(de, &mut rng);
        WorldModel::from_parts(config, store, render, FreezePlan::none())
    }

    pub fn from_parts(config: ModelConfig, store: ParamStore, render: RenderMap, freeze: FreezePlan) -> Result<Self> {
        let get = |n: &str| store.id(n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")));
        let lift = ContextLift {
            w: get("lift.w")?,
            slot: get("lift.slot")?,
        };
        Ok(WorldModel {
            backbone: Backbone::bind(&store, &config)?,
            heads: Heads::bind(&store, &config)?,
            reflector: Reflector::bind(&store, &config)?,
            lift,
            config,
            store,
            render,
            freeze,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn reflector(&self) -> &Reflector {
        &self.reflector
    }

    /// Accepts a component name or `signal_heads` for both head groups.
    pub fn set_freeze(&mut self, which: &str, frozen: bool) -> Result<()> {
        let comps: Vec<Component> = if which == "signal_heads" {
            vec![Component::UnifiedHeads, Component::RenderHeads]
        } else {
            vec![which.parse()?]
        };
        for c in comps {
            self.freeze.set(c, frozen);
        }
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.freeze.is_frozen(self.store.component(id))
    }

    pub fn checksums(&self) -> BTreeMap<Component, String> {
        self.store.checksums()
    }

    fn raw_context(&self, g: &mut Graph, src: &ContextSource) -> Result<Var> {
        let (w, slots) = (g.param(self.lift.w), g.param(self.lift.slot));
        let mut rows = Vec::with_capacity(src.len());
        for (slot, e) in &src.rows {
            if e.dim() != self.config.d_enc {
                return Err(Error::dim("context row", self.config.d_enc, e.dim()));
            }
            let x = g.constant(Matrix::row_vector(e.0.clone()));
            let y = g.matmul(x, w);
            let s = g.slice_rows(slots, slot.index(), slot.index() + 1);
            rows.push(g.add(y, s));
        }
        Ok(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) })
    }

    /// Context token blocks for the query, or `None` when there is nothing to prepend.
    pub fn context_graph(
        &self,
        g: &mut Graph,
        state: &WorldState,
        action: &ActionDesc,
        ctx: Option<&ContextInput>,
    ) -> Result<Option<(Var, Vec<usize>)>> {
        let Some(ctx) = ctx.filter(|c| !c.sources.is_empty()) else {
            return Ok(None);
        };
        let mut blocks = Vec::with_capacity(ctx.sources.len());
        let mut sizes = Vec::with_capacity(ctx.sources.len());
        match ctx.mode {
            ContextMode::Raw => {
                for src in ctx.sources {
                    if src.is_empty() {
                        continue;
                    }
                    blocks.push(self.raw_context(g, src)?);
                    sizes.push(src.len());
                }
            }
            ContextMode::Reflected => {
                let cond = encode_condition(state, action)?;
                for src in ctx.sources {
                    if src.is_empty() {
                        continue;
                    }
                    let c = self.reflector.context_graph(g, src)?;
                    blocks.push(self.reflector.reflect_graph(g, c, &cond)?);
                    sizes.push(self.reflector.n_queries());
                }
            }
        }
        if blocks.is_empty() {
            return Ok(None);
        }
        let v = if blocks.len() == 1 { blocks[0] } else { g.concat_rows(&blocks) };
        Ok(Some((v, sizes)))
    }

    /// Build the prediction graph; returns one `1 × d_enc` node per (space, output).
    pub fn outputs_graph(
        &self,
        g: &mut Graph,
        state: &WorldState,
        action: &ActionDesc,
        ctx: Option<&ContextInput>,
        outputs: &BTreeSet<Modality>,
        spaces: &[TargetSpace],
    ) -> Result<BTreeMap<(TargetSpace, Modality), Var>> {
        let context = self.context_graph(g, state, action, ctx)?;
        let placeholders: Vec<ContextTokens> = match &context {
            Some((_, sizes)) => sizes
                .iter()
                .map(|&n| ContextTokens(Matrix::zeros(n, self.config.d_model)))
                .collect(),
            None => Vec::new(),
        };
        let stream = frame_input(state, action, &placeholders, outputs, self.config.k_sig)?;
        let spans = locate_signal_spans(&stream)?;
        let hidden = self.backbone.forward_graph(g, &stream, context.map(|c| c.0), true)?;
        let mut out = BTreeMap::new();
        for (m, (s, e)) in spans {
            let rows = g.slice_rows(hidden, s, e);
            for &space in spaces {
                let head = self.heads.get(space, m)?;
                out.insert((space, m), head.graph(g, rows)?);
            }
        }
        Ok(out)
    }

    /// Predicted embeddings in the given target space.
    pub fn predict_in(
        &self,
        space: TargetSpace,
        state: &WorldState,
        action: &ActionDesc,
        ctx: Option<&ContextInput>,
        outputs: &BTreeSet<Modality>,
    ) -> Result<BTreeMap<Modality, Embedding>> {
        let none = |_| false;
        let mut g = Graph::with_tracking(&self.store, &none);
        let out = self.outputs_graph(&mut g, state, action, ctx, outputs, &[space])?;
        Ok(out
            .into_iter()
            .map(|((_, m), v)| (m, Embedding(g.value(v).data.clone())))
            .collect())
    }

    /// Predicted embeddings in the unified space.
    pub fn predict(
        &self,
        state: &WorldState,
        action: &ActionDesc,
        ctx: Option<&ContextInput>,
        outputs: &BTreeSet<Modality>,
    ) -> Result<BTreeMap<Modality, Embedding>> {
        self.predict_in(TargetSpace::Unified, state, action, ctx, outputs)
    }

    /// Raw context rows lifted into model space, as the tokens the raw variants prepend.
    pub fn lift_context(&self, src: &ContextSource) -> Result<ContextTokens> {
        let none = |_| false;
        let mut g = Graph::with_tracking(&self.store, &none);
        let v = self.raw_context(&mut g, src)?;
        Ok(ContextTokens(g.value(v).clone()))
    }

    /// Reflected context tokens for one context and query.
    pub fn reflect_context(&self, src: &ContextSource, state: &WorldState, action: &ActionDesc) -> Result<ContextTokens> {
        let lifted = self.reflector.encode_context(&self.store, src)?;
        let cond = encode_condition(state, action)?;
        Ok(ContextTokens(self.reflector.reflect(&self.store, &lifted, &cond)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_enc: 4,
            k_sig: 2,
            ..ModelConfig::default()
        }
    }

    fn e(v: f64) -> Embedding {
        Embedding(vec![v, 1.0 - v, 0.5 * v, 0.2])
    }

    fn query() -> (WorldState, ActionDesc) {
        (
            WorldState::from_pairs([(Modality::Image, e(0.3)), (Modality::Audio, e(0.8))]).unwrap(),
            ActionDesc::new("tilt", e(0.1)).unwrap(),
        )
    }

    #[test]
    fn empty_context_equals_base() {
        let m = WorldModel::new(small()).unwrap();
        let (s, a) = query();
        let out: BTreeSet<_> = Modality::STATE.into();
        let base = m.predict(&s, &a, None, &out).unwrap();
        for mode in [ContextMode::Raw, ContextMode::Reflected] {
            let c = ContextInput::new(mode, &[]);
            assert_eq!(m.predict(&s, &a, Some(&c), &out).unwrap(), base);
        }
    }

    #[test]
    fn context_changes_prediction() {
        let m = WorldModel::new(small()).unwrap();
        let (s, a) = query();
        let src = ContextSource::new(&s, &a, Some(&s)).unwrap();
        let out: BTreeSet<_> = [Modality::Video].into();
        let base = m.predict(&s, &a, None, &out).unwrap();
        let srcs = [src.clone(), src];
        for mode in [ContextMode::Raw, ContextMode::Reflected] {
            let c = ContextInput::new(mode, &srcs);
            let p = m.predict(&s, &a, Some(&c), &out).unwrap();
            assert_ne!(p, base);
            assert_eq!(p[&Modality::Video].dim(), 4);
        }
    }

    #[test]
    fn freeze_names() {
        let mut m = WorldModel::new(small()).unwrap();
        m.set_freeze("base", true).unwrap();
        m.set_freeze("signal_heads", true).unwrap();
        assert!(m.freeze.is_frozen(Component::UnifiedHeads));
        assert!(m.freeze.is_frozen(Component::RenderHeads));
        assert!(matches!(m.set_freeze("decoder", true), Err(Error::UnknownComponent(_))));
    }

    #[test]
    fn render_space_is_separate() {
        let m = WorldModel::new(small()).unwrap();
        let (s, a) = query();
        let out: BTreeSet<_> = [Modality::Image].into();
        let u = m.predict_in(TargetSpace::Unified, &s, &a, None, &out).unwrap();
        let r = m.predict_in(TargetSpace::Render, &s, &a, None, &out).unwrap();
        assert_ne!(u, r);
    }
}
