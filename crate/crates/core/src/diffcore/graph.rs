//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node to the [`Graph`]; [`Graph::backward`]
//! walks the tape in reverse and accumulates adjoints. Nodes only carry
//! adjoints when some ancestor was created with [`Graph::input`], so
//! constant subgraphs cost nothing on the way back.
//!
//! All values are matrices (`rows x cols`); vectors are `1 x n` rows and
//! scalars are `1 x 1`.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    LogSigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, gain: Var, bias: Var },
    GatherRows(Var, Vec<usize>),
    WeightedRowSum(Var, Vec<(usize, f64)>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumAll(Var),
    LogSumExp(Var),
    NormalizeSum(Var),
    MaxAll(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::GatherRows(..) => "gather_rows",
            Op::WeightedRowSum(..) => "weighted_row_sum",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SumAll(..) => "sum_all",
            Op::LogSumExp(..) => "log_sum_exp",
            Op::NormalizeSum(..) => "normalize_sum",
            Op::MaxAll(..) => "max_all",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    poisoned: Option<&'static str>,
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out (m x n) += a (m x k) * b^T where b is n x k
fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out (k x n) += a^T * g where a is m x k and g is m x n
fn matmul_tn_into(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `ln sigmoid(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn layer_norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives an adjoint.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Fails with the name of the first operation that produced a
    /// non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.poisoned {
            Some(op) => Err(Error::NonFinite { op: op.to_string() }),
            None => Ok(()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dimensions differ");
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMulNt(a, b), ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch in {}", op.name());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row expects a 1 x {n} row");
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for i in 0..m {
            for (v, b) in t.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *v += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(t, Op::AddRow(a, row), ng)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// `ln(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut t = self.value(a).clone();
        for i in 0..m {
            let row = &mut t.data_mut()[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let ng = self.ng(a);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with a learned `1 x n` gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gain), (1, n));
        assert_eq!(self.shape(bias), (1, n));
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for i in 0..m {
            let row = &mut t.data_mut()[i * n..(i + 1) * n];
            let (mean, inv) = layer_norm_stats(row);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(t, Op::LayerNormRows { x, gain, bias }, ng)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, n) = self.shape(table);
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            assert!(id < rows, "gather index {id} out of range {rows}");
            data.extend_from_slice(src.row_slice(id));
        }
        let t = Tensor::new(vec![ids.len(), n], data);
        let ng = self.ng(table);
        self.push(t, Op::GatherRows(table, ids.to_vec()), ng)
    }

    /// `sum_i w_i * a[row_i]` as a `1 x n` row.
    pub fn weighted_row_sum(&mut self, a: Var, weights: Vec<(usize, f64)>) -> Var {
        let (m, n) = self.shape(a);
        let src = self.value(a);
        let mut out = vec![0.0; n];
        for &(r, w) in &weights {
            assert!(r < m, "row {r} out of range {m}");
            for (o, v) in out.iter_mut().zip(src.row_slice(r)) {
                *o += w * v;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::row(out), Op::WeightedRowSum(a, weights), ng)
    }

    /// Mean of the listed rows (duplicates count twice).
    pub fn mean_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        assert!(!rows.is_empty(), "mean over zero rows");
        let w = 1.0 / rows.len() as f64;
        self.weighted_row_sum(a, rows.iter().map(|&r| (r, w)).collect())
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start < end && end <= n, "bad column slice {start}..{end} of {n}");
        let src = self.value(a);
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&src.row_slice(i)[start..end]);
        }
        let t = Tensor::new(vec![m, end - start], data);
        let ng = self.ng(a);
        self.push(t, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        assert!(parts.iter().all(|&p| self.shape(p).0 == m), "concat_cols row mismatch");
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(vec![m, total], data), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        assert!(parts.iter().all(|&p| self.shape(p).1 == n), "concat_rows column mismatch");
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            m += self.shape(p).0;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(vec![m, n], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `ln(sum(exp(a)))` over every entry, shift-stable.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = max + d.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::LogSumExp(a), ng)
    }

    /// `a / sum(a)`. The caller guarantees a nonzero sum.
    pub fn normalize_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let t = self.value(a).map(|v| v / s);
        let ng = self.ng(a);
        self.push(t, Op::NormalizeSum(a), ng)
    }

    /// Maximum entry; the adjoint goes to the first maximizer.
    pub fn max_all(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        assert!(!d.is_empty(), "max over an empty tensor");
        let mut best = 0;
        for (i, v) in d.iter().enumerate() {
            if *v > d[best] {
                best = i;
            }
        }
        let m = d[best];
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::MaxAll(a, best), ng)
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        if grads.iter().flatten().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite {
                op: "backward".to_string(),
            });
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_inplace(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("slot just filled"));
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = G B^T, dB = A^T G
                self.accumulate_with(grads, *a, |t| matmul_nt_into(g.data(), vb, t.data_mut(), m, n, k));
                self.accumulate_with(grads, *b, |t| matmul_tn_into(va, g.data(), t.data_mut(), m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // C = A B^T: dA = G B, dB = G^T A
                self.accumulate_with(grads, *a, |t| matmul_into(g.data(), vb, t.data_mut(), m, n, k));
                self.accumulate_with(grads, *b, |t| matmul_tn_into(g.data(), va, t.data_mut(), m, n, k));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let (m, n) = (g.rows(), g.cols());
                self.accumulate_with(grads, *row, |t| {
                    for i in 0..m {
                        for j in 0..n {
                            t.data_mut()[j] += g.data()[i * n + j];
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |t| {
                    for ((o, gv), bv) in t.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += gv * bv;
                    }
                });
                self.accumulate_with(grads, *b, |t| {
                    for ((o, gv), av) in t.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(gv, xv)| gv * gelu_grad(*xv)).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d));
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(gv, xv)| gv * sigmoid(-xv)).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d));
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = (out.rows(), out.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let y = &out.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], d));
            }
            Op::LayerNormRows { x, gain, bias } => {
                let xv = self.value(*x);
                let gainv = self.value(*gain).data();
                let (m, n) = (xv.rows(), xv.cols());
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut gy = vec![0.0; n];
                for i in 0..m {
                    let row = xv.row_slice(i);
                    let (mean, inv) = layer_norm_stats(row);
                    let gr = &g.data()[i * n..(i + 1) * n];
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * inv;
                        gy[j] = gr[j] * gainv[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    let mean_gy = gy.iter().sum::<f64>() / n as f64;
                    let mean_gyx = gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[i * n + j] = inv * (gy[j] - mean_gy - xhat[j] * mean_gyx);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, n], dx));
                self.accumulate(grads, *gain, Tensor::row(dgain));
                self.accumulate(grads, *bias, Tensor::row(dbias));
            }
            Op::GatherRows(table, ids) => {
                let n = g.cols();
                self.accumulate_with(grads, *table, |t| {
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut t.data_mut()[id * n..(id + 1) * n];
                        for (o, v) in dst.iter_mut().zip(g.row_slice(i)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::WeightedRowSum(a, weights) => {
                let n = g.cols();
                self.accumulate_with(grads, *a, |t| {
                    for &(r, w) in weights {
                        let dst = &mut t.data_mut()[r * n..(r + 1) * n];
                        for (o, v) in dst.iter_mut().zip(g.data()) {
                            *o += w * v;
                        }
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (m, w) = (g.rows(), g.cols());
                let n = self.shape(*a).1;
                self.accumulate_with(grads, *a, |t| {
                    for i in 0..m {
                        for j in 0..w {
                            t.data_mut()[i * n + start + j] += g.data()[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    self.accumulate_with(grads, p, |t| {
                        for i in 0..m {
                            for j in 0..w {
                                t.data_mut()[i * w + j] += g.data()[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate_with(grads, p, |t| {
                        for (o, v) in t.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                            *o += v;
                        }
                    });
                    offset += len;
                }
            }
            Op::SumAll(a) => {
                let gv = g.item();
                self.accumulate_with(grads, *a, |t| t.data_mut().iter_mut().for_each(|o| *o += gv));
            }
            Op::LogSumExp(a) => {
                let gv = g.item();
                let lse = out.item();
                let x = self.value(*a);
                self.accumulate_with(grads, *a, |t| {
                    for (o, xv) in t.data_mut().iter_mut().zip(x.data()) {
                        *o += gv * (xv - lse).exp();
                    }
                });
            }
            Op::NormalizeSum(a) => {
                let x = self.value(*a);
                let s = x.sum();
                let gx: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
                self.accumulate_with(grads, *a, |t| {
                    for (o, gv) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += gv / s - gx / (s * s);
                    }
                });
            }
            Op::MaxAll(a, idx) => {
                let gv = g.item();
                self.accumulate_with(grads, *a, |t| t.data_mut()[*idx] += gv);
            }
        }
    }
}
