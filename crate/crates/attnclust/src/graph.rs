//! Reverse-mode differentiation over [`Tensor`] operations.
//!
//! A [`Graph`] is a tape: every operation appends one node holding the
//! forward value and enough information to replay its local gradient rule.
//! [`Graph::backward`] walks the tape once in exact reverse insertion order,
//! which makes gradients deterministic — the same graph built twice produces
//! bitwise-identical results.
//!
//! The op set is the minimum needed to express an attention encoder with a
//! similarity head and a binary cross entropy loss, plus a couple of
//! reductions that make scalar test losses easy to write.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer-norm variance stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sigmoid outputs are clamped into `[SIGMOID_CLAMP, 1 - SIGMOID_CLAMP]` so
/// that downstream `log` calls in the cross-entropy loss stay finite.
pub const SIGMOID_CLAMP: f64 = 1e-7;

/// Element-wise activation functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => {
                let s = if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                };
                s.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
            }
        }
    }

    /// Derivative expressed through input `x` and output `y = apply(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Adds a `1 x d` bias row to every row of the input.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    RowSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Elementwise {
        x: NodeId,
        act: Activation,
    },
    ConcatCols(Vec<NodeId>),
    /// Output row `i*n + j` is `left[i] + right[j]`.
    PairwiseSum(NodeId, NodeId),
    Reshape(NodeId),
    SumAll(NodeId),
    /// Mean binary cross entropy against a constant 0/1 target.
    Bce {
        pred: NodeId,
        target: Tensor,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts a tensor as a leaf; it participates in backward iff
    /// `requires_grad` is set on the tensor.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad;
        self.push(Op::Leaf, t, needs)
    }

    /// Inserts a non-differentiable leaf.
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.requires_grad = false;
        self.push(Op::Leaf, t, false)
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, needs))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(Op::Transpose(a), value, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.rows(), ta.cols(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, needs))
    }

    /// Adds a `1 x d` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let cols = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(idx, v)| v + tb.data()[idx % cols])
            .collect();
        let value = Tensor::new(tx.rows(), cols, data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBias(x, bias), value, needs))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), value, needs)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).row_softmax()?;
        let needs = self.needs(a);
        Ok(self.push(Op::RowSoftmax(a), value, needs))
    }

    /// Per-row normalization to zero mean and unit variance, then an affine
    /// map by `gain` and `bias` (both `1 x d`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.shape() != (1, d) {
            return Err(Error::shape("layer_norm gain", tx.shape(), tg.shape()));
        }
        if tb.shape() != (1, d) {
            return Err(Error::shape("layer_norm bias", tx.shape(), tb.shape()));
        }
        let mut out = Vec::with_capacity(tx.len());
        for i in 0..tx.rows() {
            let row = tx.row(i);
            let (mean, rstd) = row_moments(row);
            for j in 0..d {
                out.push((row[j] - mean) * rstd * tg.data()[j] + tb.data()[j]);
            }
        }
        let value = Tensor::new(tx.rows(), d, out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias }, value, needs))
    }

    pub fn elementwise(&mut self, x: NodeId, act: Activation) -> NodeId {
        let value = self.value(x).map(|v| act.apply(v));
        let needs = self.needs(x);
        self.push(Op::Elementwise { x, act }, value, needs)
    }

    /// Concatenates nodes with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Data("concat_cols needs at least one part".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let t = self.value(p);
                if t.rows() != rows {
                    return Err(Error::shape("concat_cols", (rows, 0), t.shape()));
                }
                out.extend_from_slice(t.row(i));
            }
        }
        let value = Tensor::new(rows, total, out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, needs))
    }

    /// All pairwise row sums: row `i*n + j` of the output is
    /// `left.row(i) + right.row(j)`.
    pub fn pairwise_sum(&mut self, left: NodeId, right: NodeId) -> Result<NodeId> {
        let (tl, tr) = (self.value(left), self.value(right));
        if tl.cols() != tr.cols() {
            return Err(Error::shape("pairwise_sum", tl.shape(), tr.shape()));
        }
        let (m, n, d) = (tl.rows(), tr.rows(), tl.cols());
        let mut out = Vec::with_capacity(m * n * d);
        for i in 0..m {
            for j in 0..n {
                for c in 0..d {
                    out.push(tl.row(i)[c] + tr.row(j)[c]);
                }
            }
        }
        let value = Tensor::new(m * n, d, out)?;
        let needs = self.needs(left) || self.needs(right);
        Ok(self.push(Op::PairwiseSum(left, right), value, needs))
    }

    /// Reinterprets the row-major data under a new shape of equal length.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.len() != rows * cols {
            return Err(Error::shape("reshape", tx.shape(), (rows, cols)));
        }
        let value = Tensor::new(rows, cols, tx.data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), value, needs))
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::SumAll(x), Tensor::filled(1, 1, s), needs)
    }

    /// Mean binary cross entropy of `pred` against a constant 0/1 `target`
    /// of the same shape. Predictions are clamped away from 0 and 1.
    pub fn bce_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(Error::shape("bce_loss", tp.shape(), target.shape()));
        }
        if !target.data().iter().all(|&g| g == 0.0 || g == 1.0) {
            return Err(Error::Data(
                "bce_loss target must contain only 0 and 1".into(),
            ));
        }
        let count = tp.len() as f64;
        let mut total = 0.0;
        for (&s, &g) in tp.data().iter().zip(target.data()) {
            let s = s.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP);
            total -= g * s.ln() + (1.0 - g) * (1.0 - s).ln();
        }
        let value = Tensor::filled(1, 1, total / count);
        let needs = self.needs(pred);
        Ok(self.push(
            Op::Bce {
                pred,
                target: target.clone(),
            },
            value,
            needs,
        ))
    }

    /// Runs the backward pass from a `1 x 1` node, filling `grad` on every
    /// node that transitively requires gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lt = self.nodes[loss.0].value.scalar()?;
        if !lt.is_finite() {
            return Err(Error::Numerical(format!(
                "backward from non-finite value {lt}"
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = if node.needs_grad {
                Some(vec![0.0; node.value.len()])
            } else {
                None
            };
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing upstream wants a gradient
        }
        self.nodes[loss.0].value.grad.as_mut().unwrap()[0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let out_grad = match self.nodes[idx].value.grad.clone() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &out_grad)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        if let Some(g) = self.nodes[id.0].value.grad.as_mut() {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    fn propagate(&mut self, idx: usize, out_grad: &[f64]) -> Result<()> {
        // Ops are matched by value to avoid borrowing `self.nodes` across the
        // accumulate calls; inputs are cloned where the rule needs them.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let grad_t = Tensor::new(
                    self.nodes[idx].value.rows(),
                    self.nodes[idx].value.cols(),
                    out_grad.to_vec(),
                )?;
                if self.needs(a) {
                    let bt = self.value(b).transpose();
                    let da = grad_t.matmul(&bt)?;
                    self.accumulate(a, da.data());
                }
                if self.needs(b) {
                    let at = self.value(a).transpose();
                    let db = at.matmul(&grad_t)?;
                    self.accumulate(b, db.data());
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                let (rows, cols) = self.nodes[idx].value.shape();
                let mut da = vec![0.0; out_grad.len()];
                for i in 0..rows {
                    for j in 0..cols {
                        da[j * rows + i] = out_grad[i * cols + j];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, out_grad);
                self.accumulate(b, out_grad);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da: Vec<f64> = out_grad
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = out_grad
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            Op::AddBias(x, bias) => {
                let (x, bias) = (*x, *bias);
                let cols = self.value(bias).cols();
                self.accumulate(x, out_grad);
                if self.needs(bias) {
                    let mut db = vec![0.0; cols];
                    for (idx, g) in out_grad.iter().enumerate() {
                        db[idx % cols] += g;
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let da: Vec<f64> = out_grad.iter().map(|g| g * c).collect();
                self.accumulate(a, &da);
            }
            Op::RowSoftmax(a) => {
                let a = *a;
                let y = self.nodes[idx].value.clone();
                let (rows, cols) = y.shape();
                let mut da = vec![0.0; out_grad.len()];
                for i in 0..rows {
                    let yr = y.row(i);
                    let gr = &out_grad[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        da[i * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let tx = self.value(x).clone();
                let tg = self.value(gain).clone();
                let (rows, d) = tx.shape();
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for i in 0..rows {
                    let row = tx.row(i);
                    let (mean, rstd) = row_moments(row);
                    let gr = &out_grad[i * d..(i + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = gr[j] * tg.data()[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = gr[j] * tg.data()[j];
                        dx[i * d + j] = rstd
                            * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gain, &dgain);
                self.accumulate(bias, &dbias);
            }
            Op::Elementwise { x, act } => {
                let (x, act) = (*x, *act);
                let y = self.nodes[idx].value.clone();
                let tx = self.value(x);
                let da: Vec<f64> = out_grad
                    .iter()
                    .zip(tx.data().iter().zip(y.data()))
                    .map(|(g, (&xi, &yi))| g * act.derivative(xi, yi))
                    .collect();
                self.accumulate(x, &da);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let rows = self.nodes[idx].value.rows();
                let total = self.nodes[idx].value.cols();
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = vec![0.0; rows * cols];
                        for i in 0..rows {
                            let src = &out_grad[i * total + offset..i * total + offset + cols];
                            dp[i * cols..(i + 1) * cols].copy_from_slice(src);
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += cols;
                }
            }
            Op::PairwiseSum(left, right) => {
                let (left, right) = (*left, *right);
                let m = self.value(left).rows();
                let n = self.value(right).rows();
                let d = self.value(left).cols();
                if self.needs(left) {
                    let mut dl = vec![0.0; m * d];
                    for i in 0..m {
                        for j in 0..n {
                            let src = &out_grad[(i * n + j) * d..(i * n + j + 1) * d];
                            for c in 0..d {
                                dl[i * d + c] += src[c];
                            }
                        }
                    }
                    self.accumulate(left, &dl);
                }
                if self.needs(right) {
                    let mut dr = vec![0.0; n * d];
                    for i in 0..m {
                        for j in 0..n {
                            let src = &out_grad[(i * n + j) * d..(i * n + j + 1) * d];
                            for c in 0..d {
                                dr[j * d + c] += src[c];
                            }
                        }
                    }
                    self.accumulate(right, &dr);
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                self.accumulate(x, out_grad);
            }
            Op::SumAll(x) => {
                let x = *x;
                let g = out_grad[0];
                let da = vec![g; self.value(x).len()];
                self.accumulate(x, &da);
            }
            Op::Bce { pred, target } => {
                let pred = *pred;
                let target = target.clone();
                let g = out_grad[0];
                let tp = self.value(pred);
                let inv_count = 1.0 / tp.len() as f64;
                let da: Vec<f64> = tp
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&s, &t)| {
                        let s = s.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP);
                        g * inv_count * (-t / s + (1.0 - t) / (1.0 - s))
                    })
                    .collect();
                self.accumulate(pred, &da);
            }
        }
        Ok(())
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Compares analytic gradients against central finite differences.
///
/// `build` must deterministically construct a scalar loss from leaves bound
/// to `params` (in order). Returns the maximum over all parameters of
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`, where `|.|`
/// is the Euclidean norm over each parameter tensor. Comparing whole
/// parameters rather than single entries keeps the measure meaningful for
/// entries whose true gradient sits below the finite-difference noise floor.
pub fn grad_check<F>(build: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::Config("grad_check step must be positive".into()));
    }
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad()))
            .collect();
        let loss = build(&mut g, &ids)?;
        g.value(loss).scalar()
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad()))
        .collect();
    let loss = build(&mut g, &ids)?;
    let base = g.value(loss).scalar()?;
    if !base.is_finite() {
        return Err(Error::Numerical(format!(
            "grad_check aborted: loss is {base}"
        )));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("leaf requires grad").to_vec())
        .collect();

    let mut worst = 0.0_f64;
    let mut scratch: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let mut diff_sq = 0.0;
        let mut analytic_sq = 0.0;
        let mut numeric_sq = 0.0;
        for e in 0..p.len() {
            let original = p.data()[e];
            scratch[pi].data_mut()[e] = original + step;
            let f_plus = eval(&scratch)?;
            scratch[pi].data_mut()[e] = original - step;
            let f_minus = eval(&scratch)?;
            scratch[pi].data_mut()[e] = original;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::Numerical(format!(
                    "grad_check aborted: perturbed loss not finite at param {pi} entry {e}"
                )));
            }
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[pi][e];
            diff_sq += (a - numeric) * (a - numeric);
            analytic_sq += a * a;
            numeric_sq += numeric * numeric;
        }
        let rel = diff_sq.sqrt() / (1e-12_f64).max(analytic_sq.sqrt() + numeric_sq.sqrt());
        worst = worst.max(rel);
    }
    Ok(worst)
}
