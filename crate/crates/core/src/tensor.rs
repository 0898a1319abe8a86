//! Dense row-major matrices and a small reverse-mode autodiff tape.
//!
//! A [`Graph`] records operations over [`Var`] handles. Parameters are read
//! directly out of a [`ParamStore`] (never copied); `backward` returns one
//! gradient per parameter index plus gradients for any input marked with
//! [`Graph::input`].

use crate::params::{ParamId, ParamStore};
use crate::types::ZERO_NORM;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape does not match data");
        Matrix { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Matrix::from_vec(1, n, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        matmul_acc(&mut out, self, rhs);
        out
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(&self, rhs: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        matmul_t_acc(&mut out, self, rhs);
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// out += a · b
fn matmul_acc(out: &mut Matrix, a: &Matrix, b: &Matrix) {
    debug_assert_eq!(a.cols, b.rows);
    let m = b.cols;
    for i in 0..a.rows {
        let orow = &mut out.data[i * m..(i + 1) * m];
        for p in 0..a.cols {
            let aip = a.data[i * a.cols + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out += a · bᵀ
fn matmul_t_acc(out: &mut Matrix, a: &Matrix, b: &Matrix) {
    debug_assert_eq!(a.cols, b.cols);
    // Row-wise axpy over bᵀ adds the same terms in the same order as a dot
    // product per element, so results are bit-identical but vectorize.
    let n = b.rows;
    let mut bt = vec![0.0; b.cols * n];
    for j in 0..n {
        for (p, v) in b.row(j).iter().enumerate() {
            bt[p * n + j] = *v;
        }
    }
    let mut s = vec![0.0; n];
    for i in 0..a.rows {
        s.iter_mut().for_each(|x| *x = 0.0);
        for (p, x) in a.row(i).iter().enumerate() {
            for (sj, y) in s.iter_mut().zip(&bt[p * n..(p + 1) * n]) {
                *sj += x * y;
            }
        }
        for (o, sj) in out.data[i * out.cols..(i + 1) * out.cols].iter_mut().zip(&s) {
            *o += sj;
        }
    }
}

/// out += aᵀ · b
fn t_matmul_acc(out: &mut Matrix, a: &Matrix, b: &Matrix) {
    debug_assert_eq!(a.rows, b.rows);
    let m = b.cols;
    for p in 0..a.rows {
        let brow = &b.data[p * m..(p + 1) * m];
        for i in 0..a.cols {
            let api = a.data[p * a.cols + i];
            if api == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const RMS_EPS: f64 = 1e-6;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Attention mask applied before a row softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Row `i` may attend to columns `0..=i`.
    Causal,
}

/// Deliberate backward-pass corruption, used to prove the gradient checker
/// catches broken derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    GeluDerivative,
    SoftmaxJacobian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    RmsNorm(Var, Var),
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    MeanRows(Var),
    CosineLoss(Var, Var),
    Mse(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
}

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

struct Node {
    op: Op,
    value: Value,
    needs_grad: bool,
    /// Per-row inverse RMS for `RmsNorm`.
    aux: Vec<f64>,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    track: &'a dyn Fn(ParamId) -> bool,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    fault: Option<BackwardFault>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    /// Indexed by parameter index; `None` for untracked or unused parameters.
    pub params: Vec<Option<Matrix>>,
    nodes: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a graph input.
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

fn track_all(_: ParamId) -> bool {
    true
}

impl<'a> Graph<'a> {
    /// A graph that tracks gradients for every parameter.
    pub fn new(store: &'a ParamStore) -> Self {
        Graph::with_tracking(store, &track_all)
    }

    /// A graph that only computes gradients for parameters where `track`
    /// returns true. Untracked parameters still take part in the forward pass.
    pub fn with_tracking(store: &'a ParamStore, track: &'a dyn Fn(ParamId) -> bool) -> Self {
        Graph {
            store,
            track,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; store.len()],
            fault: None,
        }
    }

    pub fn set_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            needs_grad,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant that does not receive gradients.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Input, m, false)
    }

    /// An input whose gradient is reported by [`Gradients::of`].
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Op::Input, m, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        let needs = (self.track)(id);
        self.nodes.push(Node {
            op: Op::Param(id.index()),
            value: Value::Param(id),
            needs_grad: needs,
            aux: Vec::new(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), out, ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMulT(a, b), out, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), out, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().zip(&self.value(b).data).for_each(|(x, y)| *x -= y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), out, ng)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        debug_assert_eq!(r.rows, 1);
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            out.row_mut(i).iter_mut().zip(&r.data).for_each(|(x, y)| *x += y);
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(Op::AddRow(a, row), out, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().zip(&self.value(b).data).for_each(|(x, y)| *x *= y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), out, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        let ng = self.ng(a);
        self.push(Op::Scale(a, s), out, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = gelu(*x));
        let ng = self.ng(a);
        self.push(Op::Gelu(a), out, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = x.tanh());
        let ng = self.ng(a);
        self.push(Op::Tanh(a), out, ng)
    }

    /// Row-wise RMS normalization with a learned `1×n` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let xv = self.value(x);
        let g = self.value(gain);
        let n = xv.cols;
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(xv.rows);
        for i in 0..xv.rows {
            let row = xv.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv.push(r);
            out.row_mut(i)
                .iter_mut()
                .zip(&g.data)
                .for_each(|(o, gj)| *o = *o * r * gj);
        }
        let ng = self.ng(x) || self.ng(gain);
        let v = self.push(Op::RmsNorm(x, gain), out, ng);
        self.nodes[v.0].aux = inv;
        v
    }

    /// Row softmax. Masked entries get probability zero.
    pub fn softmax(&mut self, a: Var, mask: Mask) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            let limit = match mask {
                Mask::None => out.cols,
                Mask::Causal => (i + 1).min(out.cols),
            };
            let row = out.row_mut(i);
            let mx = row[..limit].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row[..limit].iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row[..limit].iter_mut() {
                *v /= s;
            }
            for v in row[limit..].iter_mut() {
                *v = 0.0;
            }
        }
        let ng = self.ng(a);
        self.push(Op::Softmax(a), out, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows: column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatRows(parts.to_vec()), Matrix::from_vec(rows, cols, data), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, ng)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let m = self.value(a);
        assert!(start <= end && end <= m.rows, "slice_rows out of range");
        let out = Matrix::from_vec(end - start, m.cols, m.data[start * m.cols..end * m.cols].to_vec());
        let ng = self.ng(a);
        self.push(Op::SliceRows(a, start), out, ng)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let m = self.value(a);
        assert!(start <= end && end <= m.cols, "slice_cols out of range");
        let mut out = Matrix::zeros(m.rows, end - start);
        for r in 0..m.rows {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..end]);
        }
        let ng = self.ng(a);
        self.push(Op::SliceCols(a, start), out, ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows * m.cols, rows * cols, "reshape size mismatch");
        let out = Matrix::from_vec(rows, cols, m.data.clone());
        let ng = self.ng(a);
        self.push(Op::Reshape(a), out, ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(1, m.cols);
        for r in 0..m.rows {
            out.data.iter_mut().zip(m.row(r)).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / m.rows as f64;
        out.data.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(a);
        self.push(Op::MeanRows(a), out, ng)
    }

    /// `1 - cos(a, b)` over all entries. NaN when either norm is degenerate.
    pub fn cosine_loss(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.data.len(), bv.data.len(), "cosine_loss size mismatch");
        let na = av.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = bv.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let loss = if na < ZERO_NORM || nb < ZERO_NORM {
            f64::NAN
        } else {
            let d: f64 = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).sum();
            1.0 - d / (na * nb)
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::CosineLoss(a, b), Matrix::from_vec(1, 1, vec![loss]), ng)
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.data.len(), bv.data.len(), "mse size mismatch");
        let n = av.data.len() as f64;
        let loss = av.data.iter().zip(&bv.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mse(a, b), Matrix::from_vec(1, 1, vec![loss]), ng)
    }

    /// `Σ w_i · s_i` over `1×1` scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Op::WeightedSum(terms.to_vec()), Matrix::from_vec(1, 1, vec![total]), ng)
    }

    /// Reverse pass from a `1×1` loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));
        let mut param_grads: Vec<Option<Matrix>> = vec![None; self.store.len()];

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Param(p) => {
                    param_grads[*p] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let mut da = Matrix::zeros(av.rows, av.cols);
                        matmul_t_acc(&mut da, &g, bv);
                        acc(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let mut db = Matrix::zeros(bv.rows, bv.cols);
                        t_matmul_acc(&mut db, av, &g);
                        acc(&mut grads, *b, db);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let mut da = Matrix::zeros(av.rows, av.cols);
                        matmul_acc(&mut da, &g, bv);
                        acc(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let mut db = Matrix::zeros(bv.rows, bv.cols);
                        t_matmul_acc(&mut db, &g, av);
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        let mut neg = g.clone();
                        neg.data.iter_mut().for_each(|x| *x = -*x);
                        acc(&mut grads, *b, neg);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let mut dr = Matrix::zeros(1, g.cols);
                        for i in 0..g.rows {
                            dr.data.iter_mut().zip(g.row(i)).for_each(|(d, x)| *d += x);
                        }
                        acc(&mut grads, *row, dr);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let mut da = g.clone();
                        da.data.iter_mut().zip(&bv.data).for_each(|(d, y)| *d *= y);
                        acc(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let mut db = g;
                        db.data.iter_mut().zip(&av.data).for_each(|(d, x)| *d *= x);
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Scale(a, s) => {
                    let mut da = g;
                    da.data.iter_mut().for_each(|d| *d *= s);
                    acc(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut da = g;
                    let faulty = self.fault == Some(BackwardFault::GeluDerivative);
                    da.data.iter_mut().zip(&x.data).for_each(|(d, xv)| {
                        *d *= if faulty { 0.5 * (1.0 + xv.tanh()) } else { gelu_grad(*xv) }
                    });
                    acc(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(idx));
                    let mut da = g;
                    da.data.iter_mut().zip(&y.data).for_each(|(d, t)| *d *= 1.0 - t * t);
                    acc(&mut grads, *a, da);
                }
                Op::RmsNorm(x, gain) => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let n = xv.cols as f64;
                    if self.ng(*gain) {
                        let mut dg = Matrix::zeros(1, xv.cols);
                        for i in 0..xv.rows {
                            let r = node.aux[i];
                            for j in 0..xv.cols {
                                dg.data[j] += g.get(i, j) * xv.get(i, j) * r;
                            }
                        }
                        acc(&mut grads, *gain, dg);
                    }
                    if self.ng(*x) {
                        let mut dx = Matrix::zeros(xv.rows, xv.cols);
                        for i in 0..xv.rows {
                            let r = node.aux[i];
                            let xr = xv.row(i);
                            let gr = g.row(i);
                            let s: f64 = (0..xv.cols).map(|j| gv.data[j] * gr[j] * xr[j]).sum();
                            let k = r * r * r * s / n;
                            for j in 0..xv.cols {
                                dx.data[i * xv.cols + j] = r * gv.data[j] * gr[j] - k * xr[j];
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Softmax(a) => {
                    let p = self.value(Var(idx));
                    let mut da = Matrix::zeros(p.rows, p.cols);
                    let faulty = self.fault == Some(BackwardFault::SoftmaxJacobian);
                    for i in 0..p.rows {
                        let pr = p.row(i);
                        let gr = g.row(i);
                        let dotp: f64 = if faulty {
                            0.0
                        } else {
                            pr.iter().zip(gr).map(|(x, y)| x * y).sum()
                        };
                        for j in 0..p.cols {
                            da.data[i * p.cols + j] = pr[j] * (gr[j] - dotp);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        if self.ng(p) {
                            let d = Matrix::from_vec(r, c, g.data[off * c..(off + r) * c].to_vec());
                            acc(&mut grads, p, d);
                        }
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        if self.ng(p) {
                            let mut d = Matrix::zeros(r, c);
                            for i in 0..r {
                                d.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                            }
                            acc(&mut grads, p, d);
                        }
                        off += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Matrix::zeros(r, c);
                    d.data[start * c..start * c + g.data.len()].copy_from_slice(&g.data);
                    acc(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Matrix::from_vec(r, c, g.data));
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let inv = 1.0 / r as f64;
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i).iter_mut().zip(&g.data).for_each(|(x, y)| *x = y * inv);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::CosineLoss(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let gs = g.data[0];
                    let na = av.data.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = bv.data.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let d: f64 = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).sum();
                    let c = d / (na * nb);
                    // d(1-c)/da = -(b/(|a||b|) - c a/|a|^2)
                    if self.ng(*a) {
                        let mut da = Matrix::zeros(av.rows, av.cols);
                        for (k, o) in da.data.iter_mut().enumerate() {
                            *o = -gs * (bv.data[k] / (na * nb) - c * av.data[k] / (na * na));
                        }
                        acc(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let mut db = Matrix::zeros(bv.rows, bv.cols);
                        for (k, o) in db.data.iter_mut().enumerate() {
                            *o = -gs * (av.data[k] / (na * nb) - c * bv.data[k] / (nb * nb));
                        }
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let k = 2.0 * g.data[0] / av.data.len() as f64;
                    if self.ng(*a) {
                        let mut da = av.clone();
                        da.data.iter_mut().zip(&bv.data).for_each(|(x, y)| *x = k * (*x - y));
                        acc(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let mut db = bv.clone();
                        db.data.iter_mut().zip(&av.data).for_each(|(y, x)| *y = k * (*y - x));
                        acc(&mut grads, *b, db);
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        if self.ng(v) {
                            acc(&mut grads, v, Matrix::from_vec(1, 1, vec![w * g.data[0]]));
                        }
                    }
                }
            }
        }
        Gradients {
            params: param_grads,
            nodes: grads,
        }
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Component, ParamStore};

    fn numeric_grad(f: &dyn Fn(&Matrix) -> f64, x: &Matrix) -> Matrix {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows, x.cols);
        for k in 0..x.data.len() {
            let mut p = x.clone();
            p.data[k] += h;
            let mut m = x.clone();
            m.data[k] -= h;
            out.data[k] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.data.iter().zip(&b.data) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
            assert!(rel < tol, "analytic {x} vs numeric {y}");
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    /// Composite expression touching every op; checked against central differences.
    fn composite(x: &Matrix, store: &ParamStore, fault: Option<BackwardFault>) -> (f64, Matrix) {
        let mut g = Graph::new(store);
        g.set_fault(fault);
        let xv = g.input(x.clone());
        let w = g.param(store.id("w").unwrap());
        let gain = g.param(store.id("gain").unwrap());
        let bias = g.param(store.id("bias").unwrap());
        let h = g.matmul(xv, w);
        let h = g.add_row(h, bias);
        let h = g.rms_norm(h, gain);
        let a = g.gelu(h);
        let scores = g.matmul_t(a, h);
        let p = g.softmax(scores, Mask::Causal);
        let mixed = g.matmul(p, a);
        let t = g.tanh(mixed);
        let s = g.scale(t, 0.7);
        let m = g.mul(s, a);
        let top = g.slice_rows(m, 0, 2);
        let bottom = g.slice_rows(m, 1, 3);
        let d = g.sub(top, bottom);
        let left = g.slice_cols(d, 0, 2);
        let right = g.slice_cols(d, 2, 4);
        let cat = g.concat_cols(&[right, left]);
        let stacked = g.concat_rows(&[cat, d]);
        let mean = g.mean_rows(stacked);
        let flat = g.reshape(stacked, 1, 16);
        let target = g.constant(Matrix::row_vector(vec![0.3, -0.1, 0.5, 0.2]));
        let l1 = g.cosine_loss(mean, target);
        let target2 = g.constant(sample(1, 16, 99));
        let l2 = g.mse(flat, target2);
        let sum = g.add(p, p);
        let sm = g.mean_rows(sum);
        let l3 = g.cosine_loss(sm, target);
        let loss = g.weighted_sum(&[(l1, 1.0), (l2, 0.5), (l3, 0.25)]);
        let value = g.scalar(loss);
        let grads = g.backward(loss);
        (value, grads.of(xv).unwrap().clone())
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::default();
        s.add("w", Component::Base, sample(5, 4, 1));
        s.add("gain", Component::Base, sample(1, 4, 2));
        s.add("bias", Component::Base, sample(1, 4, 3));
        s
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let st = store();
        let x = sample(4, 5, 7);
        let (_, analytic) = composite(&x, &st, None);
        let numeric = numeric_grad(&|m| composite(m, &st, None).0, &x);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn faults_break_gradients() {
        let st = store();
        let x = sample(4, 5, 7);
        let numeric = numeric_grad(&|m| composite(m, &st, None).0, &x);
        for f in [BackwardFault::GeluDerivative, BackwardFault::SoftmaxJacobian] {
            let (_, bad) = composite(&x, &st, Some(f));
            let worst = bad
                .data
                .iter()
                .zip(&numeric.data)
                .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6))
                .fold(0.0, f64::max);
            assert!(worst > 1e-2, "{f:?} not detected");
        }
    }

    #[test]
    fn param_gradients_match() {
        let st = store();
        let x = sample(4, 5, 7);
        let mut g = Graph::new(&st);
        let xv = g.constant(x.clone());
        let w = g.param(st.id("w").unwrap());
        let h = g.matmul(xv, w);
        let h = g.gelu(h);
        let m = g.mean_rows(h);
        let t = g.constant(Matrix::row_vector(vec![1.0, 0.0, -1.0, 0.5]));
        let l = g.cosine_loss(m, t);
        let grads = g.backward(l);
        let analytic = grads.params[st.id("w").unwrap().index()].clone().unwrap();
        let f = |wm: &Matrix| {
            let mut s2 = st.clone();
            *s2.value_mut(st.id("w").unwrap()) = wm.clone();
            let mut g = Graph::new(&s2);
            let xv = g.constant(x.clone());
            let w = g.param(s2.id("w").unwrap());
            let h = g.matmul(xv, w);
            let h = g.gelu(h);
            let m = g.mean_rows(h);
            let t = g.constant(Matrix::row_vector(vec![1.0, 0.0, -1.0, 0.5]));
            let l = g.cosine_loss(m, t);
            g.scalar(l)
        };
        let numeric = numeric_grad(&f, st.value(st.id("w").unwrap()));
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let st = ParamStore::default();
        let mut g = Graph::new(&st);
        let a = g.constant(sample(3, 3, 5));
        let p = g.softmax(a, Mask::Causal);
        let pv = g.value(p);
        assert_eq!(pv.get(0, 1), 0.0);
        assert_eq!(pv.get(1, 2), 0.0);
        for r in 0..3 {
            assert!((pv.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_kernels_agree() {
        let a = sample(3, 4, 1);
        let b = sample(4, 2, 2);
        let c = a.matmul(&b);
        let c2 = a.matmul_t(&b.transpose());
        assert_close(&c, &c2, 1e-12);
    }
}
