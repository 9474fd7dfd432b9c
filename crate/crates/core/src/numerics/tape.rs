//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during a forward pass as an
//! append-only list of nodes. Node inputs always precede the node itself, so
//! the backward pass is a single reverse sweep. One tape is meant to live for
//! one training step.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::tensor::gemm;
use super::{NumericsError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_shared: bool,
    },
    Binary(Binary, usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Unary(usize, Activation),
    SoftmaxMasked(usize),
    PairwiseSum {
        src: usize,
        dst: usize,
        group: usize,
    },
    SliceCols {
        input: usize,
        start: usize,
    },
    SliceRows {
        input: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Reshape(usize),
    TransposeLast2(usize),
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward sweep: one gradient slot per tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the leaf `var`; zeros when the loss does
    /// not depend on it. Gradients of intermediate nodes are released during the sweep.
    pub fn wrt(&self, var: Var) -> Tensor {
        assert_eq!(var.tape, self.tape, "variable from a different tape");
        match &self.grads[var.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.index]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable from a different tape");
        &self.nodes[var.index].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn check(&self, var: Var) -> Result<usize, NumericsError> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(NumericsError::DetachedTensor);
        }
        Ok(var.index)
    }

    fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    fn grad_flag(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.node(ia).value, &self.node(ib).value);
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        let flag = self.grad_flag(&[ia, ib]);
        Ok(self.push(value, Op::MatMul(ia, ib), flag))
    }

    /// Batched product `[B|1, m, k] × [B, k, n] -> [B, m, n]`; a leading 1 on
    /// the left operand shares it across the batch.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.node(ia).value, &self.node(ib).value);
        let mismatch = || NumericsError::ShapeMismatch {
            op: "bmm",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        if ta.ndim() != 3 || tb.ndim() != 3 {
            return Err(mismatch());
        }
        let (ba, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (batch, kb, n) = (tb.shape()[0], tb.shape()[1], tb.shape()[2]);
        if k != kb || (ba != batch && ba != 1) {
            return Err(mismatch());
        }
        let a_shared = ba == 1 && batch != 1;
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_off = if a_shared { 0 } else { bi * m * k };
            gemm(
                m,
                k,
                n,
                &ta.data()[a_off..a_off + m * k],
                false,
                &tb.data()[bi * k * n..(bi + 1) * k * n],
                false,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        let flag = self.grad_flag(&[ia, ib]);
        Ok(self.push(
            value,
            Op::BatchMatMul {
                a: ia,
                b: ib,
                batch,
                m,
                k,
                n,
                a_shared,
            },
            flag,
        ))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.node(ia).value, &self.node(ib).value);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else {
            return Err(NumericsError::ShapeMismatch {
                op: match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        };
        let flag = self.grad_flag(&[ia, ib]);
        Ok(self.push(value, Op::Binary(kind, ia, ib), flag))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(Binary::Mul, a, b)
    }

    /// Adds a bias vector of length `cols` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (tx, tb) = (&self.node(ix).value, &self.node(ib).value);
        let (_, cols) = tx.as_matrix_dims();
        if tb.numel() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let flag = self.grad_flag(&[ix, ib]);
        Ok(self.push(value, Op::AddBias(ix, ib), flag))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let value = self.node(ia).value.map(|x| x * factor);
        let flag = self.grad_flag(&[ia]);
        Ok(self.push(value, Op::Scale(ia, factor), flag))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        if act == Activation::Identity {
            return Ok(a);
        }
        let value = self.node(ia).value.map(|x| act.apply(x));
        let flag = self.grad_flag(&[ia]);
        Ok(self.push(value, Op::Unary(ia, act), flag))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.activate(a, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, NumericsError> {
        self.activate(a, Activation::LeakyRelu { slope })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.activate(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.activate(a, Activation::Tanh)
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries come out as exactly zero.
    ///
    /// The input is viewed as `[rows, cols]` over its last axis. `mask` holds
    /// `p * cols` flags and row `r` uses mask row `r % p`, so a per-graph mask
    /// can be reused across a batch without tiling.
    pub fn softmax_masked(&mut self, scores: Var, mask: Rc<[bool]>) -> Result<Var, NumericsError> {
        let is = self.check(scores)?;
        let ts = &self.node(is).value;
        let (rows, cols) = ts.as_matrix_dims();
        if mask.is_empty() || !mask.len().is_multiple_of(cols) || rows % (mask.len() / cols) != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "softmax_masked",
                left: ts.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let period = mask.len() / cols;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let m = &mask[(r % period) * cols..(r % period + 1) * cols];
            let x = &ts.data()[r * cols..(r + 1) * cols];
            let max = x
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NumericsError::EmptyNeighborhood { row: r });
            }
            let y = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for ((yj, &xj), &keep) in y.iter_mut().zip(x).zip(m) {
                if keep {
                    *yj = (xj - max).exp();
                    total += *yj;
                }
            }
            for yj in y.iter_mut() {
                *yj /= total;
            }
        }
        let value = Tensor::new(ts.shape().to_vec(), out)?;
        let flag = self.grad_flag(&[is]);
        Ok(self.push(value, Op::SoftmaxMasked(is), flag))
    }

    /// `out[g*n + i, j] = src[g*n + i] + dst[g*n + j]` for node groups of size `n`.
    pub fn pairwise_sum(&mut self, src: Var, dst: Var, group: usize) -> Result<Var, NumericsError> {
        let (is, id) = (self.check(src)?, self.check(dst)?);
        let (ts, td) = (&self.node(is).value, &self.node(id).value);
        let rows = ts.numel();
        if td.numel() != rows || group == 0 || rows % group != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "pairwise_sum",
                left: ts.shape().to_vec(),
                right: td.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; rows * group];
        for r in 0..rows {
            let base = (r / group) * group;
            let s = ts.data()[r];
            for j in 0..group {
                out[r * group + j] = s + td.data()[base + j];
            }
        }
        let value = Tensor::new(vec![rows, group], out)?;
        let flag = self.grad_flag(&[is, id]);
        Ok(self.push(
            value,
            Op::PairwiseSum {
                src: is,
                dst: id,
                group,
            },
            flag,
        ))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let ta = &self.node(ia).value;
        let (rows, cols) = ta.as_matrix_dims();
        if ta.ndim() != 2 || len == 0 || start + len > cols {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols",
                left: ta.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(rows * len);
        for row in ta.data().chunks(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        let flag = self.grad_flag(&[ia]);
        Ok(self.push(value, Op::SliceCols { input: ia, start }, flag))
    }

    /// Rows `[start, start + len)` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let ta = &self.node(ia).value;
        if ta.ndim() != 2 || len == 0 || start + len > ta.shape()[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_rows",
                left: ta.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let cols = ta.shape()[1];
        let data = ta.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        let flag = self.grad_flag(&[ia]);
        Ok(self.push(value, Op::SliceRows { input: ia, start }, flag))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>, _>>()?;
        let first = idx.first().ok_or(NumericsError::ShapeMismatch {
            op: "concat_cols",
            left: vec![],
            right: vec![],
        })?;
        let rows = self.node(*first).value.shape()[0];
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let t = &self.node(i).value;
            if t.ndim() != 2 || t.shape()[0] != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.node(*first).value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.node(i).value.data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        let flag = self.grad_flag(&idx);
        Ok(self.push(value, Op::ConcatCols(idx), flag))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let value = self.node(ia).value.clone().reshaped(shape.to_vec())?;
        let flag = self.grad_flag(&[ia]);
        Ok(self.push(value, Op::Reshape(ia), flag))
    }

    /// Swaps the last two axes of a 3-D tensor.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let ta = &self.node(ia).value;
        if ta.ndim() != 3 {
            return Err(NumericsError::ShapeMismatch {
                op: "transpose_last2",
                left: ta.shape().to_vec(),
                right: vec![],
            });
        }
        let (b, m, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let value = Tensor::new(vec![b, n, m], transpose3(ta.data(), b, m, n))?;
        let flag = self.grad_flag(&[ia]);
        Ok(self.push(value, Op::TransposeLast2(ia), flag))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let value = Tensor::scalar(self.node(ia).value.sum());
        let flag = self.grad_flag(&[ia]);
        Ok(self.push(value, Op::Sum(ia), flag))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.check(a)?;
        let t = &self.node(ia).value;
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let flag = self.grad_flag(&[ia]);
        Ok(self.push(value, Op::Mean(ia), flag))
    }

    /// Sum of squared differences divided by `denominator`.
    pub fn squared_error(
        &mut self,
        pred: Var,
        target: Var,
        denominator: f64,
    ) -> Result<Var, NumericsError> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        let total = self.sum(sq)?;
        self.scale(total, 1.0 / denominator)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, NumericsError> {
        let n = self.value(pred).numel() as f64;
        self.squared_error(pred, target, n)
    }

    /// Reverse sweep from a scalar `loss`. Only leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let il = self.check(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.nodes[il].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[il] = Some(Tensor::full(self.nodes[il].value.shape(), 1.0));

        for idx in (0..=il).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if node.needs_grad {
                self.propagate(idx, &g, &mut grads);
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    /// Gradient buffer of `target`, zero-initialised on first use; `None`
    /// when the node does not take gradients.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], target: usize) -> Option<&'g mut [f64]> {
        if !self.nodes[target].needs_grad {
            return None;
        }
        let t =
            grads[target].get_or_insert_with(|| Tensor::zeros(self.nodes[target].value.shape()));
        Some(t.data_mut())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: usize, delta: Tensor) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, gd, false, tb.data(), true, da, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, ta.data(), true, gd, false, db, true);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_shared,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if let Some(da) = self.slot(grads, *a) {
                    for bi in 0..*batch {
                        let off = if *a_shared { 0 } else { bi * m * k };
                        gemm(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            false,
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            true,
                            &mut da[off..off + m * k],
                            true,
                        );
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for bi in 0..*batch {
                        let off = if *a_shared { 0 } else { bi * m * k };
                        gemm(
                            k,
                            m,
                            n,
                            &ta.data()[off..off + m * k],
                            true,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            true,
                        );
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (ua, ub) = (*a, *b);
                // d(out)/da is 1 or b; d(out)/db is ±1 or a.
                let partner_a = matches!(kind, Binary::Mul).then_some(tb);
                let sign_b = if matches!(kind, Binary::Sub) {
                    -1.0
                } else {
                    1.0
                };
                let partner_b = matches!(kind, Binary::Mul).then_some(ta);
                for (target, partner, sign) in [(ua, partner_a, 1.0), (ub, partner_b, sign_b)] {
                    let Some(d) = self.slot(grads, target) else {
                        continue;
                    };
                    backprop_binary(d, gd, partner, sign);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, v) in dx.iter_mut().zip(gd) {
                        *d += v;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    let cols = db.len();
                    for row in gd.chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Scale(a, factor) => {
                if let Some(da) = self.slot(grads, *a) {
                    for (d, v) in da.iter_mut().zip(gd) {
                        *d += v * factor;
                    }
                }
            }
            Op::Unary(a, act) => {
                let x = &self.nodes[*a].value;
                let y = &node.value;
                if let Some(da) = self.slot(grads, *a) {
                    for (((d, &gi), &xi), &yi) in da.iter_mut().zip(gd).zip(x.data()).zip(y.data())
                    {
                        *d += gi * act.derivative(xi, yi);
                    }
                }
            }
            Op::SoftmaxMasked(input) => {
                let y = &node.value;
                let (_, cols) = y.as_matrix_dims();
                if let Some(dx) = self.slot(grads, *input) {
                    for ((dxr, yr), gr) in dx
                        .chunks_mut(cols)
                        .zip(y.data().chunks(cols))
                        .zip(gd.chunks(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yj), &gj) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d += yj * (gj - dot);
                        }
                    }
                }
            }
            Op::PairwiseSum { src, dst, group } => {
                let group = *group;
                if let Some(ds) = self.slot(grads, *src) {
                    for (d, r) in ds.iter_mut().zip(gd.chunks(group)) {
                        *d += r.iter().sum::<f64>();
                    }
                }
                if let Some(dd) = self.slot(grads, *dst) {
                    for (r, row) in gd.chunks(group).enumerate() {
                        let base = (r / group) * group;
                        for (d, v) in dd[base..base + group].iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::SliceCols { input, start } => {
                let (_, cols) = self.nodes[*input].value.as_matrix_dims();
                let len = node.value.shape()[1];
                if let Some(dx) = self.slot(grads, *input) {
                    for (dr, gr) in dx.chunks_mut(cols).zip(gd.chunks(len)) {
                        for (d, v) in dr[*start..*start + len].iter_mut().zip(gr) {
                            *d += v;
                        }
                    }
                }
            }
            Op::SliceRows { input, start } => {
                let cols = self.nodes[*input].value.shape()[1];
                if let Some(dx) = self.slot(grads, *input) {
                    for (d, v) in dx[start * cols..start * cols + gd.len()].iter_mut().zip(gd) {
                        *d += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.shape()[1];
                    if let Some(dx) = self.slot(grads, p) {
                        for (dr, gr) in dx.chunks_mut(w).zip(gd.chunks(total)) {
                            for (d, v) in dr.iter_mut().zip(&gr[offset..offset + w]) {
                                *d += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(shape).unwrap());
            }
            Op::TransposeLast2(a) => {
                let s = g.shape();
                let (b, m, n) = (s[0], s[1], s[2]);
                let shape = self.nodes[*a].value.shape().to_vec();
                let data = transpose3(gd, b, m, n);
                self.accumulate(grads, *a, Tensor::new(shape, data).unwrap());
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    let v = g.item();
                    da.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::Mean(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    let v = g.item() / da.len() as f64;
                    da.iter_mut().for_each(|d| *d += v);
                }
            }
        }
    }
}

/// Adds `sign · g ⊙ partner` (or `sign · g` without a partner) into `d`,
/// summing over elements when `d` is a broadcast scalar.
fn backprop_binary(d: &mut [f64], g: &[f64], partner: Option<&Tensor>, sign: f64) {
    let scalar_partner = partner.filter(|p| p.numel() == 1).map(|p| p.data()[0]);
    let term = |i: usize, gi: f64| match (partner, scalar_partner) {
        (None, _) => sign * gi,
        (Some(_), Some(s)) => sign * gi * s,
        (Some(p), None) => sign * gi * p.data()[i],
    };
    if d.len() == g.len() {
        for (i, (dv, &gi)) in d.iter_mut().zip(g).enumerate() {
            *dv += term(i, gi);
        }
    } else {
        d[0] += g
            .iter()
            .enumerate()
            .map(|(i, &gi)| term(i, gi))
            .sum::<f64>();
    }
}

fn transpose3(data: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        let base = bi * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = data[base + i * n + j];
            }
        }
    }
    out
}
