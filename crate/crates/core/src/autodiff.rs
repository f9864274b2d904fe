//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Forward evaluation is eager; every operation appends a node to the tape.
//! [`Tape::backward`] walks the tape in reverse, accumulating exact gradients
//! into per-node buffers. A fresh tape is built for every training step, so
//! graphs stay acyclic and topologically ordered by construction.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, SparseMatrix, Tensor};

/// Negative slope used by every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Idx(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Matmul(Idx, Idx),
    /// `a · bᵀ`
    MatmulTransB(Idx, Idx),
    SparseMatmul { mat: Arc<SparseMatrix>, input: Idx },
    Add(Idx, Idx),
    AddN(Vec<Idx>),
    Sub(Idx, Idx),
    Mul(Idx, Idx),
    /// `(m,n) ⊙ (m,1)` column broadcast.
    MulCol(Idx, Idx),
    /// `(m,n) + (1,n)` row broadcast.
    AddRow(Idx, Idx),
    /// `mul·x + add`, elementwise with scalar constants; only the
    /// multiplier survives into the backward pass.
    Affine { x: Idx, mul: f64 },
    Sigmoid(Idx),
    Tanh(Idx),
    LeakyRelu { x: Idx, slope: f64 },
    Relu(Idx),
    SoftmaxRows(Idx),
    /// Mask already includes the `1/keep` inverted-dropout scaling.
    Dropout { x: Idx, mask: Vec<f64> },
    /// Row gather: `table[indices[k], :]` stacked.
    Gather { table: Idx, indices: Vec<usize> },
    ConcatCols(Vec<Idx>),
    ConcatRows(Vec<Idx>),
    SliceCols { x: Idx, start: usize, len: usize },
    /// Row-wise dot product of two same-shape matrices → `(m,1)`.
    RowDot(Idx, Idx),
    SumAll(Idx),
    /// Column sums → `(1,n)`.
    SumRows(Idx),
    SumSquares(Idx),
    StopGrad,
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Computation tape. `train` controls whether dropout is active; the internal
/// RNG makes dropout masks reproducible for a given seed.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    train: bool,
    rng: ChaCha8Rng,
}

impl Tape {
    pub fn train(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// The tape's RNG stream, for step-local randomness that must be
    /// reproducible alongside dropout (e.g. edge dropout).
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Every parameter leaf currently on the tape, in construction order.
    pub fn param_leaf_indices(&self) -> Vec<Idx> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { param: Some(_) }))
            .map(|(i, _)| Idx(i))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, i: Idx) -> &Tensor {
        &self.nodes[i.0].value
    }

    /// Gradient buffer of a node, populated by [`Tape::backward`].
    pub fn grad(&self, i: Idx) -> Option<&Tensor> {
        self.grads.get(i.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, value: Tensor) -> Idx {
        self.nodes.push(Node { op, value });
        Idx(self.nodes.len() - 1)
    }

    /// Registers a constant leaf (no gradient tracking beyond the buffer).
    pub fn constant(&mut self, value: Tensor) -> Idx {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Pulls a parameter's current value onto the tape; gradients flowing to
    /// this leaf are reported by [`Tape::param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Idx {
        self.push(Op::Leaf { param: Some(id) }, store.get(id).clone())
    }

    fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
        Error::Shape {
            op,
            left: a.shape_vec(),
            right: b.shape_vec(),
        }
    }

    pub fn matmul(&mut self, a: Idx, b: Idx) -> Result<Idx> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    pub fn matmul_transb(&mut self, a: Idx, b: Idx) -> Result<Idx> {
        let v = self.value(a).matmul_transb(self.value(b))?;
        Ok(self.push(Op::MatmulTransB(a, b), v))
    }

    pub fn sparse_matmul(&mut self, mat: Arc<SparseMatrix>, x: Idx) -> Result<Idx> {
        let v = mat.mul_dense(self.value(x))?;
        Ok(self.push(Op::SparseMatmul { mat, input: x }, v))
    }

    pub fn add(&mut self, a: Idx, b: Idx) -> Result<Idx> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("add", ta, tb));
        }
        let v = Tensor::from_flat(
            ta.rows,
            ta.cols,
            ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect(),
        );
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn add_n(&mut self, xs: &[Idx]) -> Result<Idx> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Data("add_n over empty list".into()))?;
        let shape = self.value(*first).shape();
        let mut data = vec![0.0; shape.0 * shape.1];
        for &x in xs {
            let t = self.value(x);
            if t.shape() != shape {
                return Err(Self::shape_err("add_n", self.value(*first), t));
            }
            for (d, v) in data.iter_mut().zip(&t.data) {
                *d += v;
            }
        }
        Ok(self.push(Op::AddN(xs.to_vec()), Tensor::from_flat(shape.0, shape.1, data)))
    }

    /// Arithmetic mean of same-shape tensors.
    pub fn mean_n(&mut self, xs: &[Idx]) -> Result<Idx> {
        let sum = self.add_n(xs)?;
        self.affine(sum, 1.0 / xs.len() as f64, 0.0)
    }

    pub fn sub(&mut self, a: Idx, b: Idx) -> Result<Idx> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("sub", ta, tb));
        }
        let v = Tensor::from_flat(
            ta.rows,
            ta.cols,
            ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect(),
        );
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Idx, b: Idx) -> Result<Idx> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("mul", ta, tb));
        }
        let v = Tensor::from_flat(
            ta.rows,
            ta.cols,
            ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect(),
        );
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// `(m,n) ⊙ c` where `c` is `(m,1)`, broadcast across columns.
    pub fn mul_col(&mut self, a: Idx, c: Idx) -> Result<Idx> {
        let (ta, tc) = (self.value(a), self.value(c));
        if tc.cols != 1 || tc.rows != ta.rows {
            return Err(Self::shape_err("mul_col", ta, tc));
        }
        let mut v = ta.clone();
        for r in 0..v.rows {
            let s = tc.data[r];
            for k in 0..v.cols {
                v.data[r * v.cols + k] *= s;
            }
        }
        Ok(self.push(Op::MulCol(a, c), v))
    }

    /// `(m,n) + b` where `b` is `(1,n)`, broadcast across rows.
    pub fn add_row(&mut self, a: Idx, b: Idx) -> Result<Idx> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows != 1 || tb.cols != ta.cols {
            return Err(Self::shape_err("add_row", ta, tb));
        }
        let mut v = ta.clone();
        for r in 0..v.rows {
            for k in 0..v.cols {
                v.data[r * v.cols + k] += tb.data[k];
            }
        }
        Ok(self.push(Op::AddRow(a, b), v))
    }

    pub fn affine(&mut self, x: Idx, mul: f64, add: f64) -> Result<Idx> {
        let v = self.value(x).map(|t| mul * t + add);
        Ok(self.push(Op::Affine { x, mul }, v))
    }

    pub fn sigmoid(&mut self, x: Idx) -> Result<Idx> {
        let v = self.value(x).map(|t| 1.0 / (1.0 + (-t).exp()));
        Ok(self.push(Op::Sigmoid(x), v))
    }

    pub fn tanh(&mut self, x: Idx) -> Result<Idx> {
        let v = self.value(x).map(f64::tanh);
        Ok(self.push(Op::Tanh(x), v))
    }

    pub fn leaky_relu(&mut self, x: Idx) -> Result<Idx> {
        let slope = LEAKY_SLOPE;
        let v = self.value(x).map(|t| if t > 0.0 { t } else { slope * t });
        Ok(self.push(Op::LeakyRelu { x, slope }, v))
    }

    /// `max(0, x)`; the subgradient at the kink is 0.
    pub fn relu(&mut self, x: Idx) -> Result<Idx> {
        let v = self.value(x).map(|t| t.max(0.0));
        Ok(self.push(Op::Relu(x), v))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Idx) -> Result<Idx> {
        let t = self.value(x);
        let mut v = Tensor::zeros(t.rows, t.cols);
        for r in 0..t.rows {
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..t.cols {
                let e = (row[k] - max).exp();
                v.data[r * t.cols + k] = e;
                sum += e;
            }
            for k in 0..t.cols {
                v.data[r * t.cols + k] /= sum;
            }
        }
        Ok(self.push(Op::SoftmaxRows(x), v))
    }

    /// Inverted dropout: identity in eval mode, Bernoulli mask scaled by
    /// `1/keep` in train mode.
    pub fn dropout(&mut self, x: Idx, keep: f64) -> Result<Idx> {
        if !self.train || keep >= 1.0 {
            return Ok(x);
        }
        if keep <= 0.0 {
            return Err(Error::Config(format!("dropout keep must be in (0,1], got {keep}")));
        }
        let len = self.value(x).data.len();
        let mask: Vec<f64> = (0..len)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let t = self.value(x);
        let v = Tensor::from_flat(
            t.rows,
            t.cols,
            t.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        Ok(self.push(Op::Dropout { x, mask }, v))
    }

    /// Gathers rows of `table` at `indices` (embedding lookup).
    pub fn gather(&mut self, table: Idx, indices: &[usize]) -> Result<Idx> {
        let t = self.value(table);
        let mut v = Tensor::zeros(indices.len(), t.cols);
        for (r, &i) in indices.iter().enumerate() {
            if i >= t.rows {
                return Err(Error::Data(format!(
                    "gather index {i} out of range for table with {} rows",
                    t.rows
                )));
            }
            v.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(t.row(i));
        }
        Ok(self.push(
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            v,
        ))
    }

    pub fn concat_cols(&mut self, xs: &[Idx]) -> Result<Idx> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Data("concat over empty list".into()))?;
        let rows = self.value(*first).rows;
        let total: usize = xs.iter().map(|&x| self.value(x).cols).sum();
        let mut v = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &x in xs {
            let t = self.value(x);
            if t.rows != rows {
                return Err(Self::shape_err("concat_cols", self.value(*first), t));
            }
            for r in 0..rows {
                v.data[r * total + offset..r * total + offset + t.cols]
                    .copy_from_slice(t.row(r));
            }
            offset += t.cols;
        }
        Ok(self.push(Op::ConcatCols(xs.to_vec()), v))
    }

    pub fn concat_rows(&mut self, xs: &[Idx]) -> Result<Idx> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Data("concat over empty list".into()))?;
        let cols = self.value(*first).cols;
        let total: usize = xs.iter().map(|&x| self.value(x).rows).sum();
        let mut v = Tensor::zeros(total, cols);
        let mut offset = 0;
        for &x in xs {
            let t = self.value(x);
            if t.cols != cols {
                return Err(Self::shape_err("concat_rows", self.value(*first), t));
            }
            v.data[offset * cols..(offset + t.rows) * cols].copy_from_slice(&t.data);
            offset += t.rows;
        }
        Ok(self.push(Op::ConcatRows(xs.to_vec()), v))
    }

    pub fn slice_cols(&mut self, x: Idx, start: usize, len: usize) -> Result<Idx> {
        let t = self.value(x);
        if start + len > t.cols {
            return Err(Error::Data(format!(
                "slice_cols [{start}, {}) out of range for {} cols",
                start + len,
                t.cols
            )));
        }
        let mut v = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            v.data[r * len..(r + 1) * len]
                .copy_from_slice(&t.row(r)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start, len }, v))
    }

    /// Row-wise dot product → `(m, 1)`.
    pub fn row_dot(&mut self, a: Idx, b: Idx) -> Result<Idx> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("row_dot", ta, tb));
        }
        let mut v = Tensor::zeros(ta.rows, 1);
        for r in 0..ta.rows {
            v.data[r] = ta
                .row(r)
                .iter()
                .zip(tb.row(r))
                .map(|(x, y)| x * y)
                .sum();
        }
        Ok(self.push(Op::RowDot(a, b), v))
    }

    pub fn sum_all(&mut self, x: Idx) -> Result<Idx> {
        let s: f64 = self.value(x).data.iter().sum();
        Ok(self.push(Op::SumAll(x), Tensor::from_flat(1, 1, vec![s])))
    }

    /// Column sums → `(1, n)`.
    pub fn sum_rows(&mut self, x: Idx) -> Result<Idx> {
        let t = self.value(x);
        let mut v = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for k in 0..t.cols {
                v.data[k] += t.data[r * t.cols + k];
            }
        }
        Ok(self.push(Op::SumRows(x), v))
    }

    /// Sum of squared entries → scalar (L2 term).
    pub fn sum_squares(&mut self, x: Idx) -> Result<Idx> {
        let s: f64 = self.value(x).data.iter().map(|v| v * v).sum();
        Ok(self.push(Op::SumSquares(x), Tensor::from_flat(1, 1, vec![s])))
    }

    /// Identity forward, zero backward.
    pub fn stop_grad(&mut self, x: Idx) -> Result<Idx> {
        let v = self.value(x).clone();
        Ok(self.push(Op::StopGrad, v))
    }

    fn accumulate(&mut self, target: Idx, delta: Tensor) {
        match &mut self.grads[target.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse pass seeding `d loss / d loss = 1`. `loss` must be `(1,1)`.
    pub fn backward(&mut self, loss: Idx) -> Result<()> {
        let t = self.value(loss);
        if t.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: t.shape_vec(),
                right: vec![1, 1],
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::from_flat(1, 1, vec![1.0]));

        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = self.grads[i].clone() else {
                continue;
            };
            // Dispatch borrows values immutably; gradients accumulate after.
            let mut pending: Vec<(Idx, Tensor)> = Vec::new();
            {
                let node = &self.nodes[i];
                match &node.op {
                    Op::Leaf { .. } => {}
                    Op::Matmul(a, b) => {
                        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                        pending.push((*a, grad.matmul_transb(tb)?));
                        pending.push((*b, ta.transa_matmul(&grad)?));
                    }
                    Op::MatmulTransB(a, b) => {
                        // y = a bᵀ: da = g b, db = gᵀ a.
                        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                        pending.push((*a, grad.matmul(tb)?));
                        pending.push((*b, grad.transa_matmul(ta)?));
                    }
                    Op::SparseMatmul { mat, input } => {
                        pending.push((*input, mat.t_mul_dense(&grad)?));
                    }
                    Op::Add(a, b) => {
                        pending.push((*a, grad.clone()));
                        pending.push((*b, grad));
                    }
                    Op::AddN(xs) => {
                        for &x in xs {
                            pending.push((x, grad.clone()));
                        }
                    }
                    Op::Sub(a, b) => {
                        pending.push((*a, grad.clone()));
                        pending.push((*b, grad.map(|v| -v)));
                    }
                    Op::Mul(a, b) => {
                        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                        let da = Tensor::from_flat(
                            grad.rows,
                            grad.cols,
                            grad.data.iter().zip(&tb.data).map(|(g, y)| g * y).collect(),
                        );
                        let db = Tensor::from_flat(
                            grad.rows,
                            grad.cols,
                            grad.data.iter().zip(&ta.data).map(|(g, x)| g * x).collect(),
                        );
                        pending.push((*a, da));
                        pending.push((*b, db));
                    }
                    Op::MulCol(a, c) => {
                        let (ta, tc) = (&self.nodes[a.0].value, &self.nodes[c.0].value);
                        let mut da = grad.clone();
                        let mut dc = Tensor::zeros(tc.rows, 1);
                        for r in 0..ta.rows {
                            let s = tc.data[r];
                            let mut acc = 0.0;
                            for k in 0..ta.cols {
                                let g = grad.data[r * ta.cols + k];
                                acc += g * ta.data[r * ta.cols + k];
                                da.data[r * ta.cols + k] = g * s;
                            }
                            dc.data[r] = acc;
                        }
                        pending.push((*a, da));
                        pending.push((*c, dc));
                    }
                    Op::AddRow(a, b) => {
                        let tb_cols = self.nodes[b.0].value.cols;
                        let mut db = Tensor::zeros(1, tb_cols);
                        for r in 0..grad.rows {
                            for k in 0..tb_cols {
                                db.data[k] += grad.data[r * tb_cols + k];
                            }
                        }
                        pending.push((*a, grad));
                        pending.push((*b, db));
                    }
                    Op::Affine { x, mul } => {
                        let m = *mul;
                        pending.push((*x, grad.map(|g| g * m)));
                    }
                    Op::Sigmoid(x) => {
                        let y = &node.value;
                        let dx = Tensor::from_flat(
                            y.rows,
                            y.cols,
                            grad.data
                                .iter()
                                .zip(&y.data)
                                .map(|(g, s)| g * s * (1.0 - s))
                                .collect(),
                        );
                        pending.push((*x, dx));
                    }
                    Op::Tanh(x) => {
                        let y = &node.value;
                        let dx = Tensor::from_flat(
                            y.rows,
                            y.cols,
                            grad.data
                                .iter()
                                .zip(&y.data)
                                .map(|(g, t)| g * (1.0 - t * t))
                                .collect(),
                        );
                        pending.push((*x, dx));
                    }
                    Op::LeakyRelu { x, slope } => {
                        let input = &self.nodes[x.0].value;
                        let s = *slope;
                        let dx = Tensor::from_flat(
                            input.rows,
                            input.cols,
                            grad.data
                                .iter()
                                .zip(&input.data)
                                .map(|(g, v)| if *v > 0.0 { *g } else { g * s })
                                .collect(),
                        );
                        pending.push((*x, dx));
                    }
                    Op::Relu(x) => {
                        let input = &self.nodes[x.0].value;
                        let dx = Tensor::from_flat(
                            input.rows,
                            input.cols,
                            grad.data
                                .iter()
                                .zip(&input.data)
                                .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                                .collect(),
                        );
                        pending.push((*x, dx));
                    }
                    Op::SoftmaxRows(x) => {
                        let y = &node.value;
                        let mut dx = Tensor::zeros(y.rows, y.cols);
                        for r in 0..y.rows {
                            let yrow = y.row(r);
                            let grow = &grad.data[r * y.cols..(r + 1) * y.cols];
                            let dot: f64 =
                                yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                            for k in 0..y.cols {
                                dx.data[r * y.cols + k] = yrow[k] * (grow[k] - dot);
                            }
                        }
                        pending.push((*x, dx));
                    }
                    Op::Dropout { x, mask } => {
                        let dx = Tensor::from_flat(
                            grad.rows,
                            grad.cols,
                            grad.data.iter().zip(mask).map(|(g, m)| g * m).collect(),
                        );
                        pending.push((*x, dx));
                    }
                    Op::Gather { table, indices } => {
                        let t = &self.nodes[table.0].value;
                        let mut dt = Tensor::zeros(t.rows, t.cols);
                        for (r, &i) in indices.iter().enumerate() {
                            for k in 0..t.cols {
                                dt.data[i * t.cols + k] += grad.data[r * t.cols + k];
                            }
                        }
                        pending.push((*table, dt));
                    }
                    Op::ConcatCols(xs) => {
                        let mut offset = 0;
                        for &x in xs {
                            let t = &self.nodes[x.0].value;
                            let mut dx = Tensor::zeros(t.rows, t.cols);
                            for r in 0..t.rows {
                                dx.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(
                                    &grad.data
                                        [r * grad.cols + offset..r * grad.cols + offset + t.cols],
                                );
                            }
                            offset += t.cols;
                            pending.push((x, dx));
                        }
                    }
                    Op::ConcatRows(xs) => {
                        let mut offset = 0;
                        for &x in xs {
                            let t = &self.nodes[x.0].value;
                            let dx = Tensor::from_flat(
                                t.rows,
                                t.cols,
                                grad.data[offset * t.cols..(offset + t.rows) * t.cols].to_vec(),
                            );
                            offset += t.rows;
                            pending.push((x, dx));
                        }
                    }
                    Op::SliceCols { x, start, len } => {
                        let t = &self.nodes[x.0].value;
                        let mut dx = Tensor::zeros(t.rows, t.cols);
                        for r in 0..t.rows {
                            dx.data[r * t.cols + start..r * t.cols + start + len]
                                .copy_from_slice(&grad.data[r * len..(r + 1) * len]);
                        }
                        pending.push((*x, dx));
                    }
                    Op::RowDot(a, b) => {
                        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                        let mut da = Tensor::zeros(ta.rows, ta.cols);
                        let mut db = Tensor::zeros(tb.rows, tb.cols);
                        for r in 0..ta.rows {
                            let g = grad.data[r];
                            for k in 0..ta.cols {
                                da.data[r * ta.cols + k] = g * tb.data[r * ta.cols + k];
                                db.data[r * ta.cols + k] = g * ta.data[r * ta.cols + k];
                            }
                        }
                        pending.push((*a, da));
                        pending.push((*b, db));
                    }
                    Op::SumAll(x) => {
                        let t = &self.nodes[x.0].value;
                        let g = grad.data[0];
                        pending.push((*x, Tensor::from_flat(t.rows, t.cols, vec![g; t.data.len()])));
                    }
                    Op::SumRows(x) => {
                        let t = &self.nodes[x.0].value;
                        let mut dx = Tensor::zeros(t.rows, t.cols);
                        for r in 0..t.rows {
                            dx.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(&grad.data);
                        }
                        pending.push((*x, dx));
                    }
                    Op::SumSquares(x) => {
                        let t = &self.nodes[x.0].value;
                        let g = grad.data[0];
                        let dx = t.map(|v| 2.0 * v * g);
                        pending.push((*x, dx));
                    }
                    Op::StopGrad => {}
                }
            }
            for (target, delta) in pending {
                self.accumulate(target, delta);
            }
        }
        Ok(())
    }

    /// Accumulated gradients per parameter slot, summed across all leaves
    /// that reference the same parameter.
    pub fn param_grads(&self) -> BTreeMap<ParamId, Tensor> {
        let mut out: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &self.grads[i] {
                    match out.get_mut(&id) {
                        Some(acc) => {
                            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                                *a += b;
                            }
                        }
                        None => {
                            out.insert(id, g.clone());
                        }
                    }
                }
            }
        }
        out
    }
}

/// Uniformly samples `count` flattened parameter coordinates.
pub fn sample_coords(store: &ParamStore, count: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = store.total_coords();
    let mut out = Vec::with_capacity(count.min(total));
    if total == 0 {
        return out;
    }
    let bounds: Vec<usize> = store.iter().map(|(_, _, t)| t.data.len()).collect();
    for _ in 0..count.min(total) {
        let mut flat = rng.random_range(0..total);
        for (slot, &len) in bounds.iter().enumerate() {
            if flat < len {
                out.push((ParamId(slot), flat));
                break;
            }
            flat -= len;
        }
    }
    out
}

/// Compares reverse-mode gradients against central finite differences at the
/// sampled coordinates and returns the maximum relative error.
///
/// `build` must assemble a deterministic scalar loss on the given tape from
/// the given parameters (dropout is disabled: the tape is in eval mode).
pub fn grad_check<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Idx>,
{
    let mut tape = Tape::eval();
    let loss = build(&mut tape, store)?;
    tape.backward(loss)?;
    let grads = tape.param_grads();

    let eval_at = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::eval();
        let l = build(&mut t, store)?;
        t.value(l).scalar()
    };

    let mut max_rel: f64 = 0.0;
    let mut perturbed = store.clone();
    for &(id, k) in coords {
        let original = store.get(id).data[k];
        let analytic = grads.get(&id).map_or(0.0, |g| g.data[k]);

        perturbed.get_mut(id).data[k] = original + h;
        let f_plus = eval_at(&perturbed)?;
        perturbed.get_mut(id).data[k] = original - h;
        let f_minus = eval_at(&perturbed)?;
        perturbed.get_mut(id).data[k] = original;

        let numeric = (f_plus - f_minus) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    }
    Ok(max_rel)
}
