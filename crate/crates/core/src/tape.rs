//! Single-use computation tape for reverse-mode differentiation.
//!
//! Every differentiable operation appends a node holding its forward value
//! and enough context to push gradients back to its operands. A tape is
//! driven through one forward pass and one [`Tape::backward`] call; the
//! gradient of each node that requires one is then available through
//! [`Tape::grad`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Transpose(Var),
    SumAll(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    PickCols { x: Var, cols: Vec<usize> },
    SliceCols { x: Var, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies the value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the loss with respect to `v`; `None` before backward or
    /// when `v` is not reachable from the loss through differentiable ops.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.expect_matrix(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = tensor::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Matmul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "add_row_bias")?;
        if self.value(bias).len() != n {
            return Err(Error::dim(
                "add_row_bias",
                self.value(x).shape(),
                self.value(bias).shape(),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            add_into(row, b);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRowBias(x, bias), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.value(a).shape().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape, data }.checked(), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: tensor::scale(v.data(), s),
        };
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "softmax_rows")?;
        let out = tensor::softmax_rows(self.value(x).data(), m, n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::SoftmaxRows(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "log_softmax_rows")?;
        let out = tensor::log_softmax_rows(self.value(x).data(), m, n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::LogSoftmaxRows(x), rg))
    }

    /// Scales every row to unit Euclidean norm. Rows with norm below 1e-12
    /// are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "l2_normalize_rows")?;
        let v = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for (i, row) in v.chunks(n.max(1)).take(m).enumerate() {
            let norm = math::sqrt(row.iter().map(|a| a * a).sum::<f64>());
            if norm < 1e-12 {
                return Err(Error::DegenerateRow {
                    op: "l2_normalize_rows",
                    row: i,
                });
            }
            norms.push(norm);
            out.extend(row.iter().map(|a| a / norm));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::L2NormalizeRows { x, norms }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "transpose")?;
        let out = tensor::transpose(self.value(x).data(), m, n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(x), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Row sums of an `m×n` matrix, as an `m×1` column.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "sum_rows")?;
        let out = if n == 0 {
            vec![0.0; m]
        } else {
            self.value(x).data().chunks(n).map(|r| r.iter().sum()).collect()
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, 1, out)?, Op::SumRows(x), rg))
    }

    /// Horizontal concatenation of matrices sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        };
        let (m, _) = self.mat(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.mat(p, "concat_cols")?;
            if mp != m {
                return Err(Error::dim(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Picks entry `cols[i]` from row `i`, giving an `m×1` column.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(x, "pick_cols")?;
        if cols.len() != m {
            return Err(Error::dim("pick_cols", self.value(x).shape(), &[cols.len()]));
        }
        if let Some((i, &c)) = cols.iter().enumerate().find(|(_, &c)| c >= n) {
            return Err(Error::Input(format!("pick_cols: row {i} selects column {c} of {n}")));
        }
        let v = self.value(x).data();
        let out = cols.iter().enumerate().map(|(i, &c)| v[i * n + c]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, 1, out)?, Op::PickCols { x, cols: cols.to_vec() }, rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "slice_cols")?;
        if start > end || end > n {
            return Err(Error::dim("slice_cols", self.value(x).shape(), &[start, end]));
        }
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, end - start, out)?, Op::SliceCols { x, start }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Fills the gradient slot of every
    /// node that requires a gradient and is reachable from `loss`; fan-out
    /// contributions are summed. A tape can be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("tape has already been used for a backward pass".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = core::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &g);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => add_into(acc.data_mut(), &g),
            None => {
                node.grad = Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data: g,
                })
            }
        }
    }

    fn propagate(&mut self, idx: usize, op: &Op, g: &Tensor) {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    let da = tensor::matmul_bt(gd, self.value(*b).data(), m, n, k);
                    self.accumulate(*a, da);
                }
                if self.rg(*b) {
                    let db = tensor::matmul_at(self.value(*a).data(), gd, m, k, n);
                    self.accumulate(*b, db);
                }
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(*x, gd.to_vec());
                if self.rg(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        add_into(&mut db, row);
                    }
                    self.accumulate(*b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, gd.to_vec());
                self.accumulate(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, gd.to_vec());
                self.accumulate(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = gd.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(*a, da);
                }
                if self.rg(*b) {
                    let db = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(*b, db);
                }
            }
            Op::Scale(x, s) => self.accumulate(*x, tensor::scale(gd, *s)),
            Op::Relu(x) => {
                let dx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = self.nodes[idx].value.data();
                let n = self.nodes[idx].value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(gd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                self.accumulate(*x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let y = self.nodes[idx].value.data();
                let n = self.nodes[idx].value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(gd.chunks(n)) {
                    let gsum: f64 = gr.iter().sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| gv - math::exp(*yv) * gsum));
                }
                self.accumulate(*x, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = self.nodes[idx].value.data();
                let n = self.nodes[idx].value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), norm) in y.chunks(n).zip(gd.chunks(n)).zip(norms) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / norm));
                }
                self.accumulate(*x, dx);
            }
            Op::Transpose(x) => {
                let (m, n) = (g.rows(), g.cols());
                self.accumulate(*x, tensor::transpose(gd, m, n));
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, vec![gd[0]; n]);
            }
            Op::SumRows(x) => {
                let n = self.value(*x).cols();
                let dx = gd.iter().flat_map(|&gv| core::iter::repeat_n(gv, n)).collect();
                self.accumulate(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(p, dp);
                    }
                    offset += w;
                }
            }
            Op::PickCols { x, cols } => {
                let n = self.value(*x).cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * n + c] = gd[i];
                }
                self.accumulate(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let w = g.cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (i, row) in gd.chunks(w.max(1)).enumerate().take(g.rows()) {
                    dx[i * n + start..i * n + start + w].copy_from_slice(row);
                }
                self.accumulate(*x, dx);
            }
        }
    }
}

impl Tensor {
    fn checked(self) -> Self {
        debug_assert_eq!(self.shape().iter().product::<usize>(), self.len());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Checks d(sum(w ⊙ f(x)))/dx against central differences for a random weighting w.
    fn check_unary(x: Tensor, seed: u64, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let probe = {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = f(&mut t, v);
            t.value(y).shape().to_vec()
        };
        let weights = random(&mut rng, probe[0], probe[1]);
        let loss_of = |xs: &Tensor| {
            let mut t = Tape::new();
            let v = t.variable(xs.clone());
            let y = f(&mut t, v);
            let w = t.constant(weights.clone());
            let p = t.mul(y, w).unwrap();
            let l = t.sum(p);
            (t, v, l)
        };
        let (mut t, v, l) = loss_of(&x);
        t.backward(l).unwrap();
        let analytic = t.grad(v).unwrap().data().to_vec();
        let numeric = central_difference(x.data(), 1e-5, |d| {
            let xs = Tensor::new(x.shape().to_vec(), d.to_vec()).unwrap();
            let (t, _, l) = loss_of(&xs);
            t.value(l).item()
        });
        max_relative_error(&analytic, &numeric)
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap());
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let z = t.constant(Tensor::from_rows(&[&[0.0], &[0.0]]).unwrap());
        let c = t.matmul(a, z).unwrap();
        assert_eq!(t.value(c).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, 3, 4);
            let b = random(&mut rng, 4, 2);
            let bb = b.clone();
            let err = check_unary(a.clone(), seed, move |t, v| {
                let c = t.constant(bb.clone());
                t.matmul(v, c).unwrap()
            });
            assert!(err < 1e-6, "seed {seed}: dA rel err {err}");
            let err = check_unary(b, seed, move |t, v| {
                let c = t.constant(a.clone());
                t.matmul(c, v).unwrap()
            });
            assert!(err < 1e-6, "seed {seed}: dB rel err {err}");
        }
    }

    #[test]
    fn softmax_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y);
        for j in 0..3 {
            assert!((v.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        // e^x normalized by hand: e^1, e^2, e^3 over their sum.
        let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (j, e) in expected.iter().enumerate() {
            assert!((v.get(1, j) - e).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 3, 5);
            let err = check_unary(x.clone(), seed, |t, v| t.softmax_rows(v).unwrap());
            assert!(err < 1e-6, "softmax seed {seed}: {err}");
            let err = check_unary(x, seed, |t, v| t.log_softmax_rows(v).unwrap());
            assert!(err < 1e-6, "log_softmax seed {seed}: {err}");
        }
    }

    #[test]
    fn relu_values_and_idempotence() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[&[-1.0, 0.0, 2.0]]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let yy = t.relu(y);
        assert_eq!(t.value(yy).data(), t.value(y).data());
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = random(&mut rng, 4, 5);
            for v in x.data_mut() {
                if v.abs() < 1e-3 {
                    *v = 0.5;
                }
            }
            let err = check_unary(x, seed, |t, v| t.relu(v));
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::from_rows(&[&[0.0, 1.0]]).unwrap());
        let y = t.relu(x);
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn l2_normalize_values_and_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[&[3.0, 4.0], &[0.6, 0.8]]).unwrap());
        let y = t.l2_normalize_rows(x).unwrap();
        let v = t.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert!((v[2] - 0.6).abs() < 1e-15 && (v[3] - 0.8).abs() < 1e-15);

        let z = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap());
        assert_eq!(
            t.l2_normalize_rows(z),
            Err(Error::DegenerateRow {
                op: "l2_normalize_rows",
                row: 1
            })
        );
    }

    #[test]
    fn l2_normalize_gradients() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 4, 8);
            let err = check_unary(x, seed, |t, v| t.l2_normalize_rows(v).unwrap());
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn structural_ops_gradients() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 3, 4);
            let other = random(&mut rng, 3, 2);
            let err = check_unary(x.clone(), seed, |t, v| t.transpose(v).unwrap());
            assert!(err < 1e-6);
            let err = check_unary(x.clone(), seed, |t, v| t.sum_rows(v).unwrap());
            assert!(err < 1e-6);
            let o = other.clone();
            let err = check_unary(x.clone(), seed, move |t, v| {
                let c = t.constant(o.clone());
                t.concat_cols(&[c, v, v]).unwrap()
            });
            assert!(err < 1e-6);
            let err = check_unary(x.clone(), seed, |t, v| t.pick_cols(v, &[3, 0, 1]).unwrap());
            assert!(err < 1e-6);
            let err = check_unary(x.clone(), seed, |t, v| t.slice_cols(v, 1, 3).unwrap());
            assert!(err < 1e-6);
            let bias = Tensor::new(vec![4], (0..4).map(|i| i as f64 * 0.1).collect()).unwrap();
            let err = check_unary(bias, seed, move |t, b| {
                let xv = t.constant(x.clone());
                t.add_row_bias(xv, b).unwrap()
            });
            assert!(err < 1e-6);
        }
    }

    #[test]
    fn sum_gives_ones_and_zero_scale_gives_zeros() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::full(&[2, 3, 2], 0.7));
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
        assert_eq!(t.grad(x).unwrap().shape(), &[2, 3, 2]);

        let mut t = Tape::new();
        let x = t.variable(Tensor::full(&[2, 2], 0.3));
        let y = t.relu(x);
        let s = t.sum(y);
        let l = t.scale(s, 0.0);
        t.backward(l).unwrap();
        assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn fan_out_contributions_add() {
        // f(x) = sum(x ⊙ x) contributes 2x, g(x) = sum(3x) contributes 3.
        let x0 = Tensor::from_rows(&[&[1.0, -2.0, 0.5]]).unwrap();
        let mut t = Tape::new();
        let x = t.variable(x0.clone());
        let sq = t.mul(x, x).unwrap();
        let f = t.sum(sq);
        let lin = t.scale(x, 3.0);
        let g = t.sum(lin);
        let l = t.add(f, g).unwrap();
        t.backward(l).unwrap();
        let grad = t.grad(x).unwrap().data();
        for (gv, xv) in grad.iter().zip(x0.data()) {
            assert_eq!(*gv, 2.0 * xv + 3.0);
        }
    }

    #[test]
    fn backward_contract_errors() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::full(&[1, 2], 1.0));
        let x = t.variable(Tensor::full(&[1, 2], 2.0));
        let p = t.mul(c, x).unwrap();
        let d = t.detach(p);
        let q = t.mul(d, x).unwrap();
        let l = t.sum(q);
        t.backward(l).unwrap();
        assert!(t.grad(c).is_none());
        assert!(t.grad(d).is_none());
        // Only the direct path through q counts; the detached copy blocks the rest.
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut t = Tape::new();
            let a = t.constant(random(&mut rng, 5, 6));
            let b = t.constant(random(&mut rng, 6, 5));
            let c = t.matmul(a, b).unwrap();
            let s = t.softmax_rows(c).unwrap();
            t.value(s).clone()
        };
        let (x, y) = (run(), run());
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
