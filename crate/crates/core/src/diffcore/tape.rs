//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive is evaluated eagerly when it is recorded, so shape errors
//! surface at construction time. The tape keeps each node's operation and
//! inputs, which makes it replayable: [`Tape::replay`] re-reads parameters from
//! a store and recomputes every node in recording order.

use std::collections::HashMap;
use std::sync::Arc;

use super::store::ParameterStore;
use super::tensor::{gemm, gemm_at, Tensor};
use crate::error::{Error, Result};

/// Mixture probabilities below this floor are clamped and counted as guard events.
pub const MIXTURE_FLOOR: f64 = 1e-12;
const EXP_CAP: f64 = 700.0;
const KL_BERNOULLI_EDGE: f64 = 1e-15;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row sparse `(column, weight)` lists, used for bag-of-words counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRows {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(rows: Vec<Vec<(usize, f64)>>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn max_col(&self) -> Option<usize> {
        self.rows.iter().flatten().map(|&(c, _)| c).max()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul { a: Var, b: Var, b_transposed: bool },
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize, end: usize },
    SliceRows { a: Var, start: usize, end: usize },
    GatherRows { a: Var, index: Vec<usize> },
    BroadcastRows { a: Var, rows: usize },
    Clamp { a: Var, lo: f64, hi: f64 },
    MaskedSoftmax { mask: Var, logits: Var, eps: f64 },
    MixtureLogLik { theta: Var, log_beta: Var, counts: Arc<SparseRows> },
    KlGaussian { mean_q: Var, logvar_q: Var, mean_p: Var, logvar_p: Var },
    KlBernoulli { q: Var, p: Var },
    StraightThrough { hard: Var, soft: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::Clamp { .. } => "clamp",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::MixtureLogLik { .. } => "mixture_loglik",
            Op::KlGaussian { .. } => "kl_gaussian",
            Op::KlBernoulli { .. } => "kl_bernoulli",
            Op::StraightThrough { .. } => "straight_through",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::SliceCols { a, .. }
            | Op::SliceRows { a, .. }
            | Op::GatherRows { a, .. }
            | Op::BroadcastRows { a, .. }
            | Op::Clamp { a, .. } => vec![*a],
            Op::MaskedSoftmax { mask, logits, .. } => vec![*mask, *logits],
            Op::MixtureLogLik {
                theta, log_beta, ..
            } => vec![*theta, *log_beta],
            Op::KlGaussian {
                mean_q,
                logvar_q,
                mean_p,
                logvar_p,
            } => vec![*mean_q, *logvar_q, *mean_p, *logvar_p],
            Op::KlBernoulli { q, p } => vec![*q, *p],
            Op::StraightThrough { hard, soft } => vec![*hard, *soft],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    guard_events: usize,
}

/// Gradients aligned with a [`ParameterStore`]'s slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    names: Vec<String>,
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Self {
            names: store.names().map(str::to_string).collect(),
            grads: store
                .slots()
                .iter()
                .map(|s| Tensor::zeros(s.value.shape()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.grads[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.grads)
    }

    pub(crate) fn tensors(&self) -> &[Tensor] {
        &self.grads
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Number of numerical guard activations (floored mixture probabilities,
    /// all-zero masks) seen while evaluating this tape.
    pub fn guard_events(&self) -> usize {
        self.guard_events
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a named store slot. Repeated calls share one node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        self.nodes.push(Node {
            op: Op::Param(name.to_string()),
            value,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let mut guards = 0;
        let value = self.eval(&op, &mut guards)?;
        self.guard_events += guards;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul {
            a,
            b,
            b_transposed: false,
        })
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul {
            a,
            b,
            b_transposed: true,
        })
    }

    /// `x * w + b`, with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.push(Op::Affine { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var> {
        self.push(Op::Offset(a, shift))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    /// Sum over the last dimension: `m x n -> m x 1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowSum(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols { a, start, end })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceRows { a, start, end })
    }

    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows { a, index })
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.push(Op::BroadcastRows { a, rows })
    }

    /// Element-wise clamp; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.push(Op::Clamp { a, lo, hi })
    }

    /// `mask * exp(logits) / (sum(mask * exp(logits)) + eps)` per row. The
    /// logits are shifted by the largest active `logit + ln(mask)` before the
    /// guard is added, so the result is invariant to adding a constant to a
    /// row. A row whose mask is entirely zero yields the uniform distribution
    /// and counts as a guard event.
    pub fn masked_softmax(&mut self, mask: Var, logits: Var, eps: f64) -> Result<Var> {
        self.push(Op::MaskedSoftmax { mask, logits, eps })
    }

    /// Per-row `sum_w count[w] * log(sum_k theta[k] * exp(log_beta[k][w]))`,
    /// evaluated by log-sum-exp over the nonzero counts only.
    pub fn mixture_loglik(
        &mut self,
        theta: Var,
        log_beta: Var,
        counts: Arc<SparseRows>,
    ) -> Result<Var> {
        self.push(Op::MixtureLogLik {
            theta,
            log_beta,
            counts,
        })
    }

    /// Row-wise `KL(N(mean_q, exp(logvar_q)) || N(mean_p, exp(logvar_p)))`
    /// for diagonal Gaussians, summed over columns.
    pub fn kl_gaussian(
        &mut self,
        mean_q: Var,
        logvar_q: Var,
        mean_p: Var,
        logvar_p: Var,
    ) -> Result<Var> {
        self.push(Op::KlGaussian {
            mean_q,
            logvar_q,
            mean_p,
            logvar_p,
        })
    }

    /// Row-wise `KL(Bernoulli(q) || Bernoulli(p))`, summed over columns.
    pub fn kl_bernoulli(&mut self, q: Var, p: Var) -> Result<Var> {
        self.push(Op::KlBernoulli { q, p })
    }

    /// Forward value of `hard`, gradient routed to `soft`.
    pub fn straight_through(&mut self, hard: Var, soft: Var) -> Result<Var> {
        self.push(Op::StraightThrough { hard, soft })
    }

    /// Recompute every node from the current store contents.
    pub fn replay(&mut self, store: &ParameterStore) -> Result<()> {
        self.guard_events = 0;
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            let value = match &op {
                Op::Constant => continue,
                Op::Param(name) => store.get(name)?.clone(),
                _ => {
                    let mut guards = 0;
                    let v = self.eval(&op, &mut guards)?;
                    self.guard_events += guards;
                    v
                }
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Reverse sweep from a one-element output.
    ///
    /// Every store slot gets a gradient; slots the output does not depend on
    /// get zeros.
    pub fn backward(&self, output: Var, store: &ParameterStore) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Param(_) = node.op {
                grads[i] = Some(g);
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut result = Gradients::zeros_like(store);
        for (name, var) in &self.params {
            if let (Some(pos), Some(g)) = (store.position(name), grads[var.0].take()) {
                result.grads[pos] = g;
            }
        }
        Ok(result)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn eval(&self, op: &Op, guards: &mut usize) -> Result<Tensor> {
        let name = op.name();
        let same = |a: &Tensor, b: &Tensor| -> Result<()> {
            if a.shape() != b.shape() {
                return Err(Error::shape(name, &[a.shape(), b.shape()]));
            }
            Ok(())
        };
        Ok(match op {
            Op::Constant | Op::Param(_) => unreachable!("leaves are not evaluated"),
            Op::MatMul { a, b, b_transposed } => {
                let (a, b) = (self.val(*a), self.val(*b));
                let (m, k) = (a.rows(), a.cols());
                let (bk, n) = if *b_transposed {
                    (b.cols(), b.rows())
                } else {
                    (b.rows(), b.cols())
                };
                if b.shape().len() != 2 || k != bk {
                    return Err(Error::shape(name, &[a.shape(), b.shape()]));
                }
                let mut out = vec![0.0; m * n];
                gemm(a.data(), b.data(), &mut out, m, k, n, *b_transposed);
                Tensor::new(vec![m, n], out)?
            }
            Op::Affine { x, w, b } => {
                let (x, w, b) = (self.val(*x), self.val(*w), self.val(*b));
                let (m, k) = (x.rows(), x.cols());
                if w.shape().len() != 2 || w.rows() != k || b.len() != w.cols() {
                    return Err(Error::shape(name, &[x.shape(), w.shape(), b.shape()]));
                }
                let n = w.cols();
                let mut out = Vec::with_capacity(m * n);
                for _ in 0..m {
                    out.extend_from_slice(b.data());
                }
                gemm(x.data(), w.data(), &mut out, m, k, n, false);
                Tensor::new(vec![m, n], out)?
            }
            Op::Add(a, b) => {
                same(self.val(*a), self.val(*b))?;
                self.val(*a).zip_map(self.val(*b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                same(self.val(*a), self.val(*b))?;
                self.val(*a).zip_map(self.val(*b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                same(self.val(*a), self.val(*b))?;
                self.val(*a).zip_map(self.val(*b), |x, y| x * y)
            }
            Op::Scale(a, c) => self.val(*a).map(|x| x * c),
            Op::Offset(a, c) => self.val(*a).map(|x| x + c),
            Op::Exp(a) => self.val(*a).map(f64::exp),
            Op::Log(a) => self.val(*a).map(f64::ln),
            Op::Sigmoid(a) => self.val(*a).map(sigmoid),
            Op::Tanh(a) => self.val(*a).map(f64::tanh),
            Op::Softmax(a) => {
                let a = self.val(*a);
                let mut out = a.clone();
                for r in 0..a.rows() {
                    softmax_in_place(out.row_slice_mut(r));
                }
                out
            }
            Op::LogSoftmax(a) => {
                let a = self.val(*a);
                let mut out = a.clone();
                for r in 0..a.rows() {
                    let row = out.row_slice_mut(r);
                    let lse = log_sum_exp(row);
                    row.iter_mut().for_each(|v| *v -= lse);
                }
                out
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).data().iter().sum()),
            Op::Mean(a) => {
                let a = self.val(*a);
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            Op::RowSum(a) => {
                let a = self.val(*a);
                let sums = (0..a.rows()).map(|r| a.row_slice(r).iter().sum()).collect();
                Tensor::new(vec![a.rows(), 1], sums)?
            }
            Op::ConcatCols(parts) => {
                let vals: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                let rows = vals.first().map(|t| t.rows()).unwrap_or(0);
                if vals.is_empty() || vals.iter().any(|t| t.rows() != rows) {
                    let shapes: Vec<&[usize]> = vals.iter().map(|t| t.shape()).collect();
                    return Err(Error::shape(name, &shapes));
                }
                let cols: usize = vals.iter().map(|t| t.cols()).sum();
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for t in &vals {
                        out.extend_from_slice(t.row_slice(r));
                    }
                }
                Tensor::new(vec![rows, cols], out)?
            }
            Op::ConcatRows(parts) => {
                let vals: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                let cols = vals.first().map(|t| t.cols()).unwrap_or(0);
                if vals.is_empty() || vals.iter().any(|t| t.cols() != cols) {
                    let shapes: Vec<&[usize]> = vals.iter().map(|t| t.shape()).collect();
                    return Err(Error::shape(name, &shapes));
                }
                let rows: usize = vals.iter().map(|t| t.rows()).sum();
                let out: Vec<f64> = vals.iter().flat_map(|t| t.data().iter().copied()).collect();
                Tensor::new(vec![rows, cols], out)?
            }
            Op::SliceCols { a, start, end } => {
                let a = self.val(*a);
                if start >= end || *end > a.cols() {
                    return Err(Error::shape(name, &[a.shape(), &[*start, *end]]));
                }
                let mut out = Vec::with_capacity(a.rows() * (end - start));
                for r in 0..a.rows() {
                    out.extend_from_slice(&a.row_slice(r)[*start..*end]);
                }
                Tensor::new(vec![a.rows(), end - start], out)?
            }
            Op::SliceRows { a, start, end } => {
                let a = self.val(*a);
                if start >= end || *end > a.rows() {
                    return Err(Error::shape(name, &[a.shape(), &[*start, *end]]));
                }
                let c = a.cols();
                Tensor::new(vec![end - start, c], a.data()[start * c..end * c].to_vec())?
            }
            Op::GatherRows { a, index } => {
                let a = self.val(*a);
                if index.is_empty() || index.iter().any(|&i| i >= a.rows()) {
                    return Err(Error::shape(name, &[a.shape(), &[index.len()]]));
                }
                let mut out = Vec::with_capacity(index.len() * a.cols());
                for &i in index {
                    out.extend_from_slice(a.row_slice(i));
                }
                Tensor::new(vec![index.len(), a.cols()], out)?
            }
            Op::BroadcastRows { a, rows } => {
                let a = self.val(*a);
                if a.rows() != 1 || *rows == 0 {
                    return Err(Error::shape(name, &[a.shape(), &[*rows]]));
                }
                Tensor::new(vec![*rows, a.cols()], a.data().repeat(*rows))?
            }
            Op::Clamp { a, lo, hi } => self.val(*a).map(|x| x.clamp(*lo, *hi)),
            Op::MaskedSoftmax { mask, logits, eps } => {
                let (mask, logits) = (self.val(*mask), self.val(*logits));
                same(mask, logits)?;
                let mut out = Tensor::zeros(logits.shape());
                for r in 0..logits.rows() {
                    let (b, z) = (mask.row_slice(r), logits.row_slice(r));
                    match masked_softmax_row(b, z, *eps) {
                        Some(row) => out.row_slice_mut(r).copy_from_slice(&row.theta),
                        None => {
                            *guards += 1;
                            let u = 1.0 / z.len() as f64;
                            out.row_slice_mut(r).iter_mut().for_each(|v| *v = u);
                        }
                    }
                }
                out
            }
            Op::MixtureLogLik {
                theta,
                log_beta,
                counts,
            } => {
                let (theta, lb) = (self.val(*theta), self.val(*log_beta));
                if theta.cols() != lb.rows()
                    || theta.rows() != counts.len()
                    || counts.max_col().is_some_and(|c| c >= lb.cols())
                {
                    return Err(Error::shape(
                        name,
                        &[theta.shape(), lb.shape(), &[counts.len()]],
                    ));
                }
                let mut out = Vec::with_capacity(theta.rows());
                for (r, row) in counts.rows().iter().enumerate() {
                    let log_theta: Vec<f64> = theta.row_slice(r).iter().map(|t| t.ln()).collect();
                    let mut total = 0.0;
                    for &(w, c) in row {
                        let (p, floored) = mixture_prob(&log_theta, lb, w);
                        if floored {
                            *guards += 1;
                        }
                        total += c * p.ln();
                    }
                    out.push(total);
                }
                Tensor::new(vec![theta.rows(), 1], out)?
            }
            Op::KlGaussian {
                mean_q,
                logvar_q,
                mean_p,
                logvar_p,
            } => {
                let (mq, lq, mp, lp) = (
                    self.val(*mean_q),
                    self.val(*logvar_q),
                    self.val(*mean_p),
                    self.val(*logvar_p),
                );
                same(mq, lq)?;
                same(mq, mp)?;
                same(mq, lp)?;
                let c = mq.cols();
                let mut out = vec![0.0; mq.rows()];
                for (i, o) in out.iter_mut().enumerate() {
                    let s = i * c..(i + 1) * c;
                    *o = kl_gaussian_row(
                        &mq.data()[s.clone()],
                        &lq.data()[s.clone()],
                        &mp.data()[s.clone()],
                        &lp.data()[s],
                    );
                }
                Tensor::new(vec![mq.rows(), 1], out)?
            }
            Op::KlBernoulli { q, p } => {
                let (q, p) = (self.val(*q), self.val(*p));
                same(q, p)?;
                let out = (0..q.rows())
                    .map(|r| {
                        q.row_slice(r)
                            .iter()
                            .zip(p.row_slice(r))
                            .map(|(&a, &b)| kl_bernoulli_scalar(a, b))
                            .sum()
                    })
                    .collect();
                Tensor::new(vec![q.rows(), 1], out)?
            }
            Op::StraightThrough { hard, soft } => {
                same(self.val(*hard), self.val(*soft))?;
                self.val(*hard).clone()
            }
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul { a, b, b_transposed } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = out.cols();
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    // b stored k x n: g * b^T; b stored n x k: g * b.
                    gemm(g.data(), bv.data(), &mut ga, m, n, k, !*b_transposed);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    if *b_transposed {
                        gemm_at(g.data(), av.data(), &mut gb, m, n, k);
                    } else {
                        gemm_at(av.data(), g.data(), &mut gb, m, k, n);
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                }
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if self.wants(*x) {
                    let mut gx = vec![0.0; m * k];
                    gemm(g.data(), wv.data(), &mut gx, m, n, k, true);
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm_at(xv.data(), g.data(), &mut gw, m, k, n);
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), gw).unwrap());
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for (o, v) in gb.iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                    let shape = self.val(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.val(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::Offset(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| x * y)),
            Op::Log(a) => self.accumulate(grads, *a, g.zip_map(self.val(*a), |x, y| x / y)),
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(out, |x, s| x * s * (1.0 - s))),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(out, |x, t| x * (1.0 - t * t))),
            Op::Softmax(a) => {
                let mut ga = g.clone();
                for r in 0..out.rows() {
                    let s = out.row_slice(r);
                    let dot: f64 = s.iter().zip(g.row_slice(r)).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &sv) in ga.row_slice_mut(r).iter_mut().zip(g.row_slice(r)).zip(s) {
                        *o = sv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = g.clone();
                for r in 0..out.rows() {
                    let total: f64 = g.row_slice(r).iter().sum();
                    for (o, &lv) in ga.row_slice_mut(r).iter_mut().zip(out.row_slice(r)) {
                        *o -= lv.exp() * total;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let shape = self.val(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.item()));
            }
            Op::Mean(a) => {
                let av = self.val(*a);
                let v = g.item() / av.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(av.shape(), v));
            }
            Op::RowSum(a) => {
                let av = self.val(*a);
                let mut ga = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let gv = g.data()[r];
                    ga.row_slice_mut(r).iter_mut().for_each(|v| *v = gv);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let pv = self.val(*p);
                    let c = pv.cols();
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(pv.len());
                        for r in 0..pv.rows() {
                            gp.extend_from_slice(&g.row_slice(r)[start..start + c]);
                        }
                        self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), gp).unwrap());
                    }
                    start += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let pv = self.val(*p);
                    let n = pv.len();
                    if self.wants(*p) {
                        let gp = g.data()[start..start + n].to_vec();
                        self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), gp).unwrap());
                    }
                    start += n;
                }
            }
            Op::SliceCols { a, start, end } => {
                let av = self.val(*a);
                let mut ga = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    ga.row_slice_mut(r)[*start..*end].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SliceRows { a, start, end } => {
                let av = self.val(*a);
                let c = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                ga.data_mut()[start * c..end * c].copy_from_slice(g.data());
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows { a, index } => {
                let av = self.val(*a);
                let mut ga = Tensor::zeros(av.shape());
                for (r, &i) in index.iter().enumerate() {
                    for (o, v) in ga.row_slice_mut(i).iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::BroadcastRows { a, .. } => {
                let av = self.val(*a);
                let mut ga = vec![0.0; av.len()];
                for r in 0..g.rows() {
                    for (o, v) in ga.iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
            }
            Op::Clamp { a, lo, hi } => {
                let ga = g.zip_map(self.val(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::MaskedSoftmax { mask, logits, eps } => {
                let (bv, zv) = (self.val(*mask), self.val(*logits));
                let mut gb = Tensor::zeros(bv.shape());
                let mut gz = Tensor::zeros(zv.shape());
                for r in 0..zv.rows() {
                    let Some(row) = masked_softmax_row(bv.row_slice(r), zv.row_slice(r), *eps) else {
                        continue;
                    };
                    let gr = g.row_slice(r);
                    let dot: f64 = gr.iter().zip(&row.theta).map(|(a, b)| a * b).sum();
                    for k in 0..gr.len() {
                        let centered = gr[k] - dot;
                        gz.row_slice_mut(r)[k] = centered * row.theta[k];
                        gb.row_slice_mut(r)[k] = centered * row.ratio[k];
                    }
                }
                self.accumulate(grads, *mask, gb);
                self.accumulate(grads, *logits, gz);
            }
            Op::MixtureLogLik {
                theta,
                log_beta,
                counts,
            } => {
                let (tv, lb) = (self.val(*theta), self.val(*log_beta));
                let beta = lb.map(f64::exp);
                let (k_topics, v_words) = (lb.rows(), lb.cols());
                let mut gt = Tensor::zeros(tv.shape());
                let mut glb = vec![0.0; k_topics * v_words];
                let want_lb = self.wants(*log_beta);
                for (r, row) in counts.rows().iter().enumerate() {
                    let th = tv.row_slice(r);
                    let log_theta: Vec<f64> = th.iter().map(|t| t.ln()).collect();
                    let gr = g.data()[r];
                    for &(w, c) in row {
                        let (p, floored) = mixture_prob(&log_theta, lb, w);
                        if floored {
                            continue;
                        }
                        let coef = gr * c / p;
                        let gtr = gt.row_slice_mut(r);
                        for k in 0..k_topics {
                            let bkw = beta.data()[k * v_words + w];
                            gtr[k] += coef * bkw;
                            if want_lb {
                                glb[k * v_words + w] += coef * th[k] * bkw;
                            }
                        }
                    }
                }
                self.accumulate(grads, *theta, gt);
                if want_lb {
                    self.accumulate(grads, *log_beta, Tensor::new(lb.shape().to_vec(), glb).unwrap());
                }
            }
            Op::KlGaussian {
                mean_q,
                logvar_q,
                mean_p,
                logvar_p,
            } => {
                let (mq, lq, mp, lp) = (
                    self.val(*mean_q),
                    self.val(*logvar_q),
                    self.val(*mean_p),
                    self.val(*logvar_p),
                );
                let c = mq.cols();
                let mut gmq = Tensor::zeros(mq.shape());
                let mut glq = Tensor::zeros(mq.shape());
                let mut gmp = Tensor::zeros(mq.shape());
                let mut glp = Tensor::zeros(mq.shape());
                for idx in 0..mq.len() {
                    let gr = g.data()[idx / c];
                    let vp = lp.data()[idx].exp();
                    let vq = lq.data()[idx].exp();
                    let diff = mq.data()[idx] - mp.data()[idx];
                    gmq.data_mut()[idx] = gr * diff / vp;
                    gmp.data_mut()[idx] = -gr * diff / vp;
                    glq.data_mut()[idx] = gr * 0.5 * (vq / vp - 1.0);
                    glp.data_mut()[idx] = gr * 0.5 * (1.0 - (vq + diff * diff) / vp);
                }
                self.accumulate(grads, *mean_q, gmq);
                self.accumulate(grads, *logvar_q, glq);
                self.accumulate(grads, *mean_p, gmp);
                self.accumulate(grads, *logvar_p, glp);
            }
            Op::KlBernoulli { q, p } => {
                let (qv, pv) = (self.val(*q), self.val(*p));
                let c = qv.cols();
                let mut gq = Tensor::zeros(qv.shape());
                let mut gp = Tensor::zeros(qv.shape());
                for idx in 0..qv.len() {
                    let gr = g.data()[idx / c];
                    let a = qv.data()[idx].clamp(KL_BERNOULLI_EDGE, 1.0 - KL_BERNOULLI_EDGE);
                    let b = pv.data()[idx].clamp(KL_BERNOULLI_EDGE, 1.0 - KL_BERNOULLI_EDGE);
                    gq.data_mut()[idx] = gr * ((a / b).ln() - ((1.0 - a) / (1.0 - b)).ln());
                    gp.data_mut()[idx] = gr * (-a / b + (1.0 - a) / (1.0 - b));
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *p, gp);
            }
            Op::StraightThrough { soft, .. } => self.accumulate(grads, *soft, g.clone()),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

struct MaskedRow {
    theta: Vec<f64>,
    /// `exp(z_k) / (sum_j b_j exp(z_j) + eps)`, the derivative of theta_k's
    /// numerator weight with respect to b_k.
    ratio: Vec<f64>,
}

/// Masked softmax of one row (see [`Tape::masked_softmax`]); `None` when `b` is all zero.
pub fn masked_softmax_values(b: &[f64], z: &[f64], eps: f64) -> Option<Vec<f64>> {
    masked_softmax_row(b, z, eps).map(|r| r.theta)
}

/// `ln(sum_k theta_k * beta_kw)` from `ln theta` and `ln beta`, floored at
/// [`MIXTURE_FLOOR`]; the flag reports whether the floor was applied.
pub fn mixture_log_prob(log_theta: &[f64], log_beta: &Tensor, w: usize) -> (f64, bool) {
    let (p, floored) = mixture_prob(log_theta, log_beta, w);
    (p.ln(), floored)
}

fn masked_softmax_row(b: &[f64], z: &[f64], eps: f64) -> Option<MaskedRow> {
    let m = b
        .iter()
        .zip(z)
        .filter(|(&bk, _)| bk > 0.0)
        .map(|(&bk, &zk)| zk + bk.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return None;
    }
    let e: Vec<f64> = z.iter().map(|&zk| (zk - m).min(EXP_CAP).exp()).collect();
    let total: f64 = b.iter().zip(&e).map(|(bk, ek)| bk * ek).sum();
    let denom = total + eps;
    Some(MaskedRow {
        theta: b.iter().zip(&e).map(|(bk, ek)| bk * ek / denom).collect(),
        ratio: e.iter().map(|ek| ek / denom).collect(),
    })
}

/// `sum_k theta_k * beta_kw` by log-sum-exp; returns the floored value and
/// whether the floor was applied.
fn mixture_prob(log_theta: &[f64], log_beta: &Tensor, w: usize) -> (f64, bool) {
    let v = log_beta.cols();
    let lb = log_beta.data();
    let m = log_theta
        .iter()
        .enumerate()
        .map(|(k, lt)| lt + lb[k * v + w])
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return (MIXTURE_FLOOR, true);
    }
    let s: f64 = log_theta
        .iter()
        .enumerate()
        .map(|(k, lt)| (lt + lb[k * v + w] - m).exp())
        .sum();
    let p = m.exp() * s;
    if p < MIXTURE_FLOOR {
        (MIXTURE_FLOOR, true)
    } else {
        (p, false)
    }
}

fn kl_gaussian_row(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    (0..mq.len())
        .map(|i| {
            let d = mq[i] - mp[i];
            0.5 * (lp[i] - lq[i] + (lq[i].exp() + d * d) / lp[i].exp() - 1.0)
        })
        .sum()
}

fn kl_bernoulli_scalar(q: f64, p: f64) -> f64 {
    let q = q.clamp(KL_BERNOULLI_EDGE, 1.0 - KL_BERNOULLI_EDGE);
    let p = p.clamp(KL_BERNOULLI_EDGE, 1.0 - KL_BERNOULLI_EDGE);
    q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0]));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn sigmoid_stays_inside_unit_interval() {
        for x in [-700.0, -40.0, -1.0, 0.0, 1.0, 30.0, 36.0] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0; 3]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = tape.constant(Tensor::matrix(2, 1, vec![3.0, -4.0]).unwrap());
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -4.0]);
    }

    #[test]
    fn shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn square_gradient() {
        let store = store_with("x", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y, &store).unwrap();
        assert_eq!(g.get("x").unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let store = store_with("x", Tensor::vector(vec![0.3, -1.2, 2.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let s = tape.softmax(x).unwrap();
        let y = tape.sum(s).unwrap();
        let g = tape.backward(y, &store).unwrap();
        for v in g.get("x").unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn unreachable_slots_get_zeros() {
        let mut store = store_with("x", Tensor::scalar(1.0));
        store.insert("unused", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.exp(x).unwrap();
        let g = tape.backward(y, &store).unwrap();
        assert_eq!(g.get("unused").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = store_with("x", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        assert!(matches!(
            tape.backward(x, &store),
            Err(Error::NonScalarOutput(_))
        ));
    }

    #[test]
    fn masked_softmax_closed_form() {
        let mut tape = Tape::new();
        let b = tape.constant(Tensor::row(vec![1.0, 0.0, 1.0]));
        let z = tape.constant(Tensor::row(vec![0.0, 99.0, 3f64.ln()]));
        let t = tape.masked_softmax(b, z, 1e-10).unwrap();
        let v = tape.value(t).data();
        assert!((v[0] - 0.25).abs() < 1e-9);
        assert_eq!(v[1], 0.0);
        assert!((v[2] - 0.75).abs() < 1e-9);
        assert_eq!(tape.guard_events(), 0);
    }

    #[test]
    fn masked_softmax_all_zero_mask_is_uniform() {
        let mut tape = Tape::new();
        let b = tape.constant(Tensor::row(vec![0.0; 4]));
        let z = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0, 4.0]));
        let t = tape.masked_softmax(b, z, 1e-10).unwrap();
        assert_eq!(tape.value(t).data(), &[0.25; 4]);
        assert_eq!(tape.guard_events(), 1);
    }

    #[test]
    fn replay_is_bit_exact() {
        let store = store_with("w", Tensor::matrix(2, 2, vec![0.3, -0.7, 1.1, 0.2]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let x = tape.constant(Tensor::row(vec![0.5, -1.5]));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.tanh(h).unwrap();
        let y = tape.sum(h).unwrap();
        let before = tape.value(y).clone();
        let g1 = tape.backward(y, &store).unwrap();
        tape.replay(&store).unwrap();
        assert_eq!(tape.value(y).data()[0].to_bits(), before.data()[0].to_bits());
        assert_eq!(tape.backward(y, &store).unwrap(), g1);
    }
}
