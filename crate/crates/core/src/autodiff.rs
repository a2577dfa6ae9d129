//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Leaves are either parameters (gradient tracked) or constants. Calling
//! [`Tape::backward`] on a 1x1 node walks the tape once in reverse and
//! returns [`Gradients`] for every node.
//!
//! ```
//! use ggcnlab::autodiff::Tape;
//! use ggcnlab::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::from_rows(&[[1.0, -2.0], [3.0, 0.5]]).unwrap());
//! let sq = tape.mul(w, w).unwrap();
//! let s = tape.sum(sq);
//! let loss = tape.scale(s, 0.5);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(w).data(), tape.value(w).data());
//! ```

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::SparsePattern;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var, Var),
    Transpose(Var),
    Elu(Var),
    Softplus(Var),
    Relu(Var),
    RowSoftmax(Var),
    Log(Var),
    ClampMin(Var, f64),
    RowL2Norm(Var),
    Dropout(Var, Vec<f64>),
    SelectRows(Var, Vec<usize>),
    Element(Var, usize, usize),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        rows: Vec<usize>,
        probs: Tensor,
    },
    EdgeDot(Var, Arc<SparsePattern>),
    EdgeOuter(Var, Arc<SparsePattern>),
    SpMM {
        weights: Var,
        x: Var,
        pattern: Arc<SparsePattern>,
    },
    ColumnNorm {
        x: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    RowNorm {
        x: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of a computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stochastic: bool,
}

/// Per-node gradients returned by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` is not an ancestor of the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Exponential linear unit with `α = 1`.
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once a stochastic op (dropout in training mode with `p > 0`)
    /// has been recorded.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name(&op)));
        }
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        Ok(self.push(value, op, tracked))
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push_op(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_op(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push_op(value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push_op(value, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("div", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push_op(value, Op::Div(a, b), &[a, b])
    }

    /// `x + 1·b` with `b` a `1 x cols` row broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let value = Tensor::from_fn(xv.rows(), xv.cols(), |r, c| xv.get(r, c) + bv.get(0, c));
        self.push_op(value, Op::AddRow(x, b), &[x, b])
    }

    /// `x ⊙ 1·g` with `g` a `1 x cols` row broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(g));
        if gv.rows() != 1 || gv.cols() != xv.cols() {
            return Err(Error::shape("mul_row", xv.shape(), gv.shape()));
        }
        let value = Tensor::from_fn(xv.rows(), xv.cols(), |r, c| xv.get(r, c) * gv.get(0, c));
        self.push_op(value, Op::MulRow(x, g), &[x, g])
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        let tracked = self.nodes[x.0].tracked;
        self.push(value, Op::Scale(x, k), tracked)
    }

    /// Multiplication by a `1 x 1` node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let k = self.scalar_of("scale_by", s)?;
        let value = self.value(x).map(|v| v * k);
        self.push_op(value, Op::ScaleBy(x, s), &[x, s])
    }

    /// Addition of a `1 x 1` node to every entry.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let k = self.scalar_of("add_scalar", s)?;
        let value = self.value(x).map(|v| v + k);
        self.push_op(value, Op::AddScalar(x, s), &[x, s])
    }

    fn scalar_of(&self, op: &'static str, s: Var) -> Result<f64> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::shape(op, sv.shape(), (1, 1)));
        }
        Ok(sv.get(0, 0))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let tracked = self.nodes[x.0].tracked;
        self.push(value, Op::Transpose(x), tracked)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(elu);
        let tracked = self.nodes[x.0].tracked;
        self.push(value, Op::Elu(x), tracked)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        let tracked = self.nodes[x.0].tracked;
        self.push(value, Op::Softplus(x), tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let tracked = self.nodes[x.0].tracked;
        self.push(value, Op::Relu(x), tracked)
    }

    /// Softmax along each row, max-shifted. On a `1 x k` node this is the
    /// softmax over a small parameter vector.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let value = row_softmax(self.value(x));
        let tracked = self.nodes[x.0].tracked;
        self.push(value, Op::RowSoftmax(x), tracked)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("log"));
        }
        let value = self.value(x).map(f64::ln);
        self.push_op(value, Op::Log(x), &[x])
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).map(|v| v.max(floor));
        let tracked = self.nodes[x.0].tracked;
        self.push(value, Op::ClampMin(x, floor), tracked)
    }

    /// Euclidean norm of every row as an `n x 1` column.
    pub fn row_l2_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::from_fn(xv.rows(), 1, |r, _| {
            xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()
        });
        let tracked = self.nodes[x.0].tracked;
        self.push(value, Op::RowL2Norm(x), tracked)
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`. Identity
    /// when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("dropout p={p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        self.stochastic = true;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_raw(xv.rows(), xv.cols(), data);
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(value, Op::Dropout(x, mask), tracked))
    }

    /// Rows of `x` at the given indices, in order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                n: xv.rows(),
            });
        }
        let value = Tensor::from_fn(rows.len(), xv.cols(), |r, c| xv.get(rows[r], c));
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(value, Op::SelectRows(x, rows.to_vec()), tracked))
    }

    /// Rows of `x` where `mask` is set.
    pub fn select_mask(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).rows() {
            return Err(Error::shape("select_mask", self.shape(x), (mask.len(), 1)));
        }
        let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        self.select_rows(x, &rows)
    }

    /// Entry `(r, c)` as a `1 x 1` node.
    pub fn element(&mut self, x: Var, r: usize, c: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if r >= rows || c >= cols {
            return Err(Error::shape("element", (rows, cols), (r + 1, c + 1)));
        }
        let value = Tensor::scalar(self.value(x).get(r, c));
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(value, Op::Element(x, r, c), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.nodes[x.0].tracked;
        self.push(value, Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over masked rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() || mask.len() != lv.rows() {
            return Err(Error::shape(
                "cross_entropy_masked",
                lv.shape(),
                (labels.len(), mask.len()),
            ));
        }
        let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::EmptyMask);
        }
        if let Some(&bad) = rows.iter().find(|&&i| labels[i] >= lv.cols()) {
            return Err(Error::IndexOutOfRange {
                index: labels[bad],
                n: lv.cols(),
            });
        }
        let probs = row_softmax(lv);
        let mut loss = 0.0;
        for &i in &rows {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
        }
        loss /= rows.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            rows,
            probs,
        };
        self.push_op(Tensor::scalar(loss), op, &[logits])
    }

    /// `x_i · x_j` for every entry `(i, j)` of `pattern`, as `1 x nnz`.
    pub fn edge_dot(&mut self, x: Var, pattern: &Arc<SparsePattern>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != pattern.n() {
            return Err(Error::shape("edge_dot", xv.shape(), (pattern.n(), pattern.n())));
        }
        let data = pattern
            .iter()
            .map(|(i, j, _)| xv.row(i).iter().zip(xv.row(j)).map(|(a, b)| a * b).sum())
            .collect();
        let value = Tensor::from_raw(1, pattern.nnz(), data);
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(value, Op::EdgeDot(x, pattern.clone()), tracked))
    }

    /// `v_i * v_j` for every entry `(i, j)` of `pattern`, with `v` an
    /// `n x 1` column; result is `1 x nnz`.
    pub fn edge_outer(&mut self, v: Var, pattern: &Arc<SparsePattern>) -> Result<Var> {
        let vv = self.value(v);
        if vv.shape() != (pattern.n(), 1) {
            return Err(Error::shape("edge_outer", vv.shape(), (pattern.n(), 1)));
        }
        let data = pattern.iter().map(|(i, j, _)| vv.get(i, 0) * vv.get(j, 0)).collect();
        let value = Tensor::from_raw(1, pattern.nnz(), data);
        let tracked = self.nodes[v.0].tracked;
        Ok(self.push(value, Op::EdgeOuter(v, pattern.clone()), tracked))
    }

    /// Sparse-dense product `Y = M X` where `M` has sparsity `pattern` and
    /// entry values `weights` (`1 x nnz`).
    pub fn spmm(&mut self, weights: Var, pattern: &Arc<SparsePattern>, x: Var) -> Result<Var> {
        let (wv, xv) = (self.value(weights), self.value(x));
        if wv.shape() != (1, pattern.nnz()) || xv.rows() != pattern.n() {
            return Err(Error::shape("spmm", wv.shape(), xv.shape()));
        }
        let d = xv.cols();
        let mut out = Tensor::zeros(xv.rows(), d);
        for (i, j, e) in pattern.iter() {
            let w = wv.get(0, e);
            let src = xv.row(j);
            for (o, s) in out.row_mut(i).iter_mut().zip(src) {
                *o += w * s;
            }
        }
        let op = Op::SpMM {
            weights,
            x,
            pattern: pattern.clone(),
        };
        self.push_op(out, op, &[weights, x])
    }

    /// Standardizes each column over rows (batch statistics), biased
    /// variance, `eps` inside the square root. Returns the node plus the
    /// per-column mean and variance observed.
    pub fn column_normalize(&mut self, x: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for r in 0..n {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += xv.get(r, c);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for r in 0..n {
            for c in 0..d {
                var[c] += (xv.get(r, c) - mean[c]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = Tensor::from_fn(n, d, |r, c| (xv.get(r, c) - mean[c]) * inv_std[c]);
        let tracked = self.nodes[x.0].tracked;
        let op = Op::ColumnNorm {
            x,
            xhat: xhat.clone(),
            inv_std,
        };
        (self.push(xhat, op, tracked), mean, var)
    }

    /// Standardizes each row over its columns.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut inv_std = Vec::with_capacity(n);
        let mut xhat = Tensor::zeros(n, d);
        for r in 0..n {
            let row = xv.row(r);
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (v + eps).sqrt();
            for (o, x) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (x - m) * is;
            }
            inv_std.push(is);
        }
        let tracked = self.nodes[x.0].tracked;
        let op = Op::RowNorm {
            x,
            xhat: xhat.clone(),
            inv_std,
        };
        self.push(xhat, op, tracked)
    }

    /// Propagates gradients from a `1 x 1` node back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.tracked {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].tracked {
                    let ga = g.matmul(&val(*b).transpose()).expect("matmul grad");
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].tracked {
                    let gb = val(*a).transpose().matmul(g).expect("matmul grad");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, g.zip_map(bv, |x, y| x / y));
                let gb = Tensor::from_fn(g.rows(), g.cols(), |r, c| {
                    -g.get(r, c) * av.get(r, c) / bv.get(r, c).powi(2)
                });
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *b, column_sums(g));
            }
            Op::MulRow(x, s) => {
                let (xv, sv) = (val(*x), val(*s));
                let gx = Tensor::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * sv.get(0, c));
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *s, column_sums(&g.zip_map(xv, |a, b| a * b)));
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, g.map(|v| v * k)),
            Op::ScaleBy(x, s) => {
                let k = val(*s).get(0, 0);
                self.accumulate(grads, *x, g.map(|v| v * k));
                let gs = g.zip_map(val(*x), |a, b| a * b).sum();
                self.accumulate(grads, *s, Tensor::scalar(gs));
            }
            Op::AddScalar(x, s) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *s, Tensor::scalar(g.sum()));
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Elu(x) => {
                let d = val(*x).map(|v| if v >= 0.0 { 1.0 } else { v.exp() });
                self.accumulate(grads, *x, g.zip_map(&d, |a, b| a * b));
            }
            Op::Softplus(x) => {
                let d = val(*x).map(sigmoid);
                self.accumulate(grads, *x, g.zip_map(&d, |a, b| a * b));
            }
            Op::Relu(x) => {
                let gx = g.zip_map(val(*x), |a, v| if v > 0.0 { a } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::RowSoftmax(x) => {
                let mut gx = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = y[c] * (gy[c] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => self.accumulate(grads, *x, g.zip_map(val(*x), |a, v| a / v)),
            Op::ClampMin(x, floor) => {
                let gx = g.zip_map(val(*x), |a, v| if v >= *floor { a } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::RowL2Norm(x) => {
                let xv = val(*x);
                let gx = Tensor::from_fn(xv.rows(), xv.cols(), |r, c| {
                    let norm = out.get(r, 0);
                    if norm > 0.0 {
                        g.get(r, 0) * xv.get(r, c) / norm
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Dropout(x, mask) => {
                let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::from_raw(g.rows(), g.cols(), data));
            }
            Op::SelectRows(x, rows) => {
                let (n, d) = val(*x).shape();
                let mut gx = Tensor::zeros(n, d);
                for (k, &r) in rows.iter().enumerate() {
                    for (o, a) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += a;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Element(x, r, c) => {
                let (n, d) = val(*x).shape();
                let mut gx = Tensor::zeros(n, d);
                gx.set(*r, *c, g.get(0, 0));
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let (n, d) = val(*x).shape();
                self.accumulate(grads, *x, Tensor::full(n, d, g.get(0, 0)));
            }
            Op::CrossEntropy {
                logits,
                labels,
                rows,
                probs,
            } => {
                let (n, c) = probs.shape();
                let scale = g.get(0, 0) / rows.len() as f64;
                let mut gx = Tensor::zeros(n, c);
                for &i in rows {
                    for (k, o) in gx.row_mut(i).iter_mut().enumerate() {
                        let onehot = if k == labels[i] { 1.0 } else { 0.0 };
                        *o = scale * (probs.get(i, k) - onehot);
                    }
                }
                self.accumulate(grads, *logits, gx);
            }
            Op::EdgeDot(x, pattern) => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (i, j, e) in pattern.iter() {
                    let ge = g.get(0, e);
                    for c in 0..xv.cols() {
                        let (xi, xj) = (xv.get(i, c), xv.get(j, c));
                        gx.row_mut(i)[c] += ge * xj;
                        gx.row_mut(j)[c] += ge * xi;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::EdgeOuter(v, pattern) => {
                let vv = val(*v);
                let mut gv = Tensor::zeros(vv.rows(), 1);
                for (i, j, e) in pattern.iter() {
                    let ge = g.get(0, e);
                    gv.row_mut(i)[0] += ge * vv.get(j, 0);
                    gv.row_mut(j)[0] += ge * vv.get(i, 0);
                }
                self.accumulate(grads, *v, gv);
            }
            Op::SpMM {
                weights,
                x,
                pattern,
            } => {
                let (wv, xv) = (val(*weights), val(*x));
                if self.nodes[weights.0].tracked {
                    let data = pattern
                        .iter()
                        .map(|(i, j, _)| g.row(i).iter().zip(xv.row(j)).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *weights, Tensor::from_raw(1, pattern.nnz(), data));
                }
                if self.nodes[x.0].tracked {
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for (i, j, e) in pattern.iter() {
                        let w = wv.get(0, e);
                        for (o, a) in gx.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += w * a;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ColumnNorm { x, xhat, inv_std } => {
                let (n, d) = xhat.shape();
                let nf = n as f64;
                let mut gx = Tensor::zeros(n, d);
                for c in 0..d {
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for r in 0..n {
                        sg += g.get(r, c);
                        sgx += g.get(r, c) * xhat.get(r, c);
                    }
                    for r in 0..n {
                        let v = inv_std[c] / nf * (nf * g.get(r, c) - sg - xhat.get(r, c) * sgx);
                        gx.set(r, c, v);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RowNorm { x, xhat, inv_std } => {
                let (n, d) = xhat.shape();
                let df = d as f64;
                let mut gx = Tensor::zeros(n, d);
                for r in 0..n {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let sg: f64 = gr.iter().sum();
                    let sgx: f64 = gr.iter().zip(hr).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] / df * (df * gr[c] - sg - hr[c] * sgx);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn row_softmax(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = out.row_mut(r);
        let mut z = 0.0;
        for (o, v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        dst.iter_mut().for_each(|o| *o /= z);
    }
    out
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::ScaleBy(..) => "scale_by",
        Op::AddScalar(..) => "add_scalar",
        Op::Transpose(..) => "transpose",
        Op::Elu(..) => "elu",
        Op::Softplus(..) => "softplus",
        Op::Relu(..) => "relu",
        Op::RowSoftmax(..) => "row_softmax",
        Op::Log(..) => "log",
        Op::ClampMin(..) => "clamp_min",
        Op::RowL2Norm(..) => "row_l2_norm",
        Op::Dropout(..) => "dropout",
        Op::SelectRows(..) => "select_rows",
        Op::Element(..) => "element",
        Op::Sum(..) => "sum",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::EdgeDot(..) => "edge_dot",
        Op::EdgeOuter(..) => "edge_outer",
        Op::SpMM { .. } => "spmm",
        Op::ColumnNorm { .. } => "column_normalize",
        Op::RowNorm { .. } => "row_normalize",
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over
/// every coordinate of every parameter. `f` must be deterministic: a tape
/// that records a stochastic op yields [`Error::Nondeterministic`].
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.is_stochastic() {
            return Err(Error::Nondeterministic);
        }
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.is_stochastic() {
        return Err(Error::Nondeterministic);
    }
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for idx in 0..params[k].len() {
            let orig = params[k].data()[idx];
            probe[k].data_mut()[idx] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[idx] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
