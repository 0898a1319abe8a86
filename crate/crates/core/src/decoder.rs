//! Signal heads into the unified and render spaces, and least-squares agent projectors.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Component, ParamId, ParamStore};
use crate::tensor::{Graph, Mask, Matrix, Var};
use crate::types::{Embedding, Modality};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSpace {
    Unified,
    Render,
}

impl TargetSpace {
    pub fn component(self) -> Component {
        match self {
            TargetSpace::Unified => Component::UnifiedHeads,
            TargetSpace::Render => Component::RenderHeads,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            TargetSpace::Unified => "head.unified",
            TargetSpace::Render => "head.render",
        }
    }
}

impl fmt::Display for TargetSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetSpace::Unified => "unified",
            TargetSpace::Render => "render",
        })
    }
}

/// One attention block over the `k_sig` rows, then flatten and an affine map to `d_enc`.
#[derive(Debug, Clone, Copy)]
pub struct SignalHead {
    pub space: TargetSpace,
    pub modality: Modality,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    k_sig: usize,
    d_model: usize,
}

impl SignalHead {
    pub fn graph(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let (r, c) = g.shape(hidden);
        if r != self.k_sig {
            return Err(Error::dim("signal rows", self.k_sig, r));
        }
        if c != self.d_model {
            return Err(Error::dim("signal width", self.d_model, c));
        }
        let (wq, wk, wv) = (g.param(self.wq), g.param(self.wk), g.param(self.wv));
        let q = g.matmul(hidden, wq);
        let k = g.matmul(hidden, wk);
        let v = g.matmul(hidden, wv);
        let s = g.matmul_t(q, k);
        let s = g.scale(s, 1.0 / (self.d_model as f64).sqrt());
        let p = g.softmax(s, Mask::None);
        let mixed = g.matmul(p, v);
        let h = g.add(hidden, mixed);
        let flat = g.reshape(h, 1, self.k_sig * self.d_model);
        let (w, b) = (g.param(self.out_w), g.param(self.out_b));
        let y = g.matmul(flat, w);
        Ok(g.add_row(y, b))
    }
}

/// Pure projection of `k_sig × d_model` hidden rows.
pub fn project_signal(store: &ParamStore, head: &SignalHead, hidden: &Matrix) -> Result<Embedding> {
    let none = |_| false;
    let mut g = Graph::with_tracking(store, &none);
    let h = g.constant(hidden.clone());
    let y = head.graph(&mut g, h)?;
    Ok(Embedding(g.value(y).data.clone()))
}

#[derive(Debug, Clone)]
pub struct Heads {
    pub heads: BTreeMap<(TargetSpace, Modality), SignalHead>,
}

impl Heads {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        for space in [TargetSpace::Unified, TargetSpace::Render] {
            let comp = space.component();
            for m in Modality::STATE {
                let p = format!("{}.{}", space.prefix(), m.name());
                for w in ["wq", "wk", "wv"] {
                    store.add_normal(format!("{p}.{w}"), comp, d, d, 0.5 * (d as f64).powf(-0.5), rng);
                }
                let fan = (cfg.k_sig * d) as f64;
                store.add_normal(format!("{p}.out_w"), comp, cfg.k_sig * d, cfg.d_enc, fan.powf(-0.5), rng);
                store.add_const(format!("{p}.out_b"), comp, 1, cfg.d_enc, 0.0);
            }
        }
        Heads::bind(store, cfg)
    }

    pub fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let get = |n: &str| store.id(n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")));
        let mut heads = BTreeMap::new();
        for space in [TargetSpace::Unified, TargetSpace::Render] {
            for m in Modality::STATE {
                let p = format!("{}.{}", space.prefix(), m.name());
                heads.insert(
                    (space, m),
                    SignalHead {
                        space,
                        modality: m,
                        wq: get(&format!("{p}.wq"))?,
                        wk: get(&format!("{p}.wk"))?,
                        wv: get(&format!("{p}.wv"))?,
                        out_w: get(&format!("{p}.out_w"))?,
                        out_b: get(&format!("{p}.out_b"))?,
                        k_sig: cfg.k_sig,
                        d_model: cfg.d_model,
                    },
                );
            }
        }
        Ok(Heads { heads })
    }

    pub fn get(&self, space: TargetSpace, m: Modality) -> Result<&SignalHead> {
        self.heads.get(&(space, m)).ok_or(Error::UnknownModality(m))
    }
}

/// Fixed random affine transform of the unified space standing in for a
/// generator's conditioning space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderMap {
    pub matrix: Matrix,
    pub bias: Vec<f64>,
}

impl RenderMap {
    pub fn random(d_enc: usize, rng: &mut impl Rng) -> Self {
        let std = (d_enc as f64).powf(-0.5);
        RenderMap {
            matrix: Matrix::from_vec(
                d_enc,
                d_enc,
                (0..d_enc * d_enc).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
            ),
            bias: (0..d_enc).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect(),
        }
    }

    pub fn apply(&self, e: &Embedding) -> Result<Embedding> {
        if e.dim() != self.matrix.cols {
            return Err(Error::dim("render input", self.matrix.cols, e.dim()));
        }
        Ok(Embedding(
            (0..self.matrix.rows)
                .map(|r| self.matrix.row(r).iter().zip(&e.0).map(|(a, b)| a * b).sum::<f64>() + self.bias[r])
                .collect(),
        ))
    }
}

/// Affine map `y = W x + b` into a downstream agent's encoder space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProjector {
    /// `d_agent × d_source`
    pub matrix: Matrix,
    pub bias: Vec<f64>,
}

impl AgentProjector {
    pub fn source_dim(&self) -> usize {
        self.matrix.cols
    }

    pub fn target_dim(&self) -> usize {
        self.matrix.rows
    }

    pub fn apply(&self, x: &Embedding) -> Result<Embedding> {
        if x.dim() != self.source_dim() {
            return Err(Error::dim("projector input", self.source_dim(), x.dim()));
        }
        Ok(Embedding(
            (0..self.matrix.rows)
                .map(|r| self.matrix.row(r).iter().zip(&x.0).map(|(a, b)| a * b).sum::<f64>() + self.bias[r])
                .collect(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorFit {
    pub projector: AgentProjector,
    pub source_dim: usize,
    pub target_dim: usize,
    /// Mean squared error over the fitted pairs.
    pub residual: f64,
    pub rank: usize,
    /// The normal equations were singular; the minimum-norm solution was used.
    pub rank_deficient: bool,
}

/// Least-squares affine fit through the SVD pseudo-inverse.
pub fn fit_agent_projector(pairs: &[(Embedding, Embedding)]) -> Result<ProjectorFit> {
    let Some((x0, y0)) = pairs.first() else {
        return Err(Error::EmptySet);
    };
    let (ds, dt) = (x0.dim(), y0.dim());
    for (x, y) in pairs {
        if x.dim() != ds {
            return Err(Error::dim("projector source", ds, x.dim()));
        }
        if y.dim() != dt {
            return Err(Error::dim("projector target", dt, y.dim()));
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidSample("non-finite projector pair".into()));
        }
    }
    let n = pairs.len();
    let x = DMatrix::from_fn(n, ds + 1, |i, j| if j < ds { pairs[i].0 .0[j] } else { 1.0 });
    let y = DMatrix::from_fn(n, dt, |i, j| pairs[i].1 .0[j]);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (n.max(ds + 1) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let sol = svd
        .solve(&y, tol)
        .map_err(|e| Error::InvalidSample(format!("least squares failed: {e}")))?;
    let resid = &x * &sol - &y;
    let residual = resid.iter().map(|v| v * v).sum::<f64>() / (n * dt) as f64;
    let matrix = Matrix::from_vec(dt, ds, (0..dt * ds).map(|k| sol[(k % ds, k / ds)]).collect());
    let bias = (0..dt).map(|j| sol[(ds, j)]).collect();
    Ok(ProjectorFit {
        projector: AgentProjector { matrix, bias },
        source_dim: ds,
        target_dim: dt,
        residual,
        rank,
        rank_deficient: rank < ds + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_enc: 5,
            k_sig: 3,
            ..ModelConfig::default()
        }
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn head_output_dim_and_zero_case() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let heads = Heads::init(&mut store, &cfg(), &mut rng).unwrap();
        let head = heads.get(TargetSpace::Unified, Modality::Image).unwrap();
        let hidden = Matrix::from_vec(3, 8, randn(&mut rng, 24));
        assert_eq!(project_signal(&store, head, &hidden).unwrap().dim(), 5);
        for id in [head.out_w, head.out_b] {
            store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(project_signal(&store, head, &hidden).unwrap().0.iter().all(|v| *v == 0.0));
        let bad = Matrix::zeros(2, 8);
        assert!(matches!(project_signal(&store, head, &bad), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn head_gradient_wrt_hidden() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let heads = Heads::init(&mut store, &cfg(), &mut rng).unwrap();
        let head = *heads.get(TargetSpace::Render, Modality::Audio).unwrap();
        let hidden = Matrix::from_vec(3, 8, randn(&mut rng, 24));
        let target = Matrix::row_vector(randn(&mut rng, 5));
        let loss_at = |h: &Matrix| {
            let mut g = Graph::new(&store);
            let hv = g.input(h.clone());
            let y = head.graph(&mut g, hv).unwrap();
            let t = g.constant(target.clone());
            let l = g.cosine_loss(y, t);
            (g.scalar(l), g, hv, l)
        };
        let (_, g, hv, l) = loss_at(&hidden);
        let grads = g.backward(l);
        let an = grads.of(hv).unwrap().clone();
        let h = 1e-4;
        for k in 0..hidden.data.len() {
            let mut p = hidden.clone();
            p.data[k] += h;
            let mut m = hidden.clone();
            m.data[k] -= h;
            let num = (loss_at(&p).0 - loss_at(&m).0) / (2.0 * h);
            let rel = (an.data[k] - num).abs() / an.data[k].abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-4, "entry {k}: {} vs {num}", an.data[k]);
        }
    }

    #[test]
    fn heads_share_nothing() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let heads = Heads::init(&mut store, &cfg(), &mut rng).unwrap();
        let hidden = Matrix::from_vec(3, 8, randn(&mut rng, 24));
        let u = *heads.get(TargetSpace::Unified, Modality::Video).unwrap();
        let r = *heads.get(TargetSpace::Render, Modality::Video).unwrap();
        let before = project_signal(&store, &u, &hidden).unwrap();
        let before_r = project_signal(&store, &r, &hidden).unwrap();
        for (id, p) in store.clone().iter() {
            if p.component == Component::RenderHeads {
                store.value_mut(id).data.iter_mut().for_each(|v| *v = 7.0);
            }
        }
        assert_eq!(project_signal(&store, &u, &hidden).unwrap(), before);
        assert_ne!(project_signal(&store, &r, &hidden).unwrap(), before_r);
    }

    #[test]
    fn planted_affine_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (ds, dt) = (64, 24);
        let w = Matrix::from_vec(dt, ds, randn(&mut rng, dt * ds));
        let b = randn(&mut rng, dt);
        let planted = AgentProjector { matrix: w.clone(), bias: b.clone() };
        let pairs: Vec<_> = (0..4 * ds)
            .map(|_| {
                let x = Embedding(randn(&mut rng, ds));
                let y = planted.apply(&x).unwrap();
                (x, y)
            })
            .collect();
        let fit = fit_agent_projector(&pairs).unwrap();
        assert!(!fit.rank_deficient);
        let err = fit
            .projector
            .matrix
            .data
            .iter()
            .zip(&w.data)
            .chain(fit.projector.bias.iter().zip(&b))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn identity_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<_> = (0..40)
            .map(|_| {
                let x = Embedding(randn(&mut rng, 8));
                (x.clone(), x)
            })
            .collect();
        let fit = fit_agent_projector(&pairs).unwrap();
        let id = Matrix::identity(8);
        assert!(fit.projector.matrix.data.iter().zip(&id.data).all(|(a, b)| (a - b).abs() < 1e-8));
        assert!(fit.projector.bias.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn single_pair_is_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Embedding(randn(&mut rng, 64));
        let y = Embedding(randn(&mut rng, 64));
        let fit = fit_agent_projector(&[(x.clone(), y.clone())]).unwrap();
        assert!(fit.rank_deficient);
        assert_eq!(fit.rank, 1);
        let p = fit.projector.apply(&x).unwrap();
        assert!(p.0.iter().zip(&y.0).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(fit.residual < 1e-20);
    }
}
