//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation appends a node to the tape; [`Tape::backward`] walks the
//! nodes in exact reverse recording order and accumulates gradients into the
//! leaves that were created with `requires_grad`. Leaf gradients accumulate
//! across calls to `backward` until [`Tape::zero_grad`] is called.
//!
//! ```
//! use awgnn_tensor::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::row_vector(&[1.0, -2.0, 3.0]), true);
//! let sq = tape.hadamard(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().as_slice(), &[2.0, -4.0, 6.0]);
//! ```

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::TensorError;
use crate::matrix::Matrix;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add {
        lhs: usize,
        rhs: usize,
        broadcast: bool,
    },
    Sub {
        lhs: usize,
        rhs: usize,
        broadcast: bool,
    },
    Scale(usize, f64),
    Hadamard(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    SoftmaxRow(usize),
    ConcatCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    CosineSimRows {
        lhs: usize,
        rhs: usize,
        broadcast: bool,
    },
    CrossEntropy {
        logits: usize,
        target: usize,
    },
    Transpose(usize),
    Sum(usize),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
    grad: Option<Matrix>,
}

/// Recording of a single forward computation.
///
/// Leaves may borrow their values (`leaf_ref`) so that large parameter
/// tables are not copied per example.
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
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

/// Numerically stable `ln Σ exp(z_i)` using max subtraction and `ln_1p`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let (arg, max) = z
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + rest.ln_1p()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Cosine similarity of two equal-length slices; zero when either is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (dot, na, nb) = cosine_parts(a, b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    (dot, aa.sqrt(), bb.sqrt())
}

fn accumulate(slot: &mut Option<Matrix>, contribution: Matrix) {
    match slot {
        Some(g) => {
            for (a, b) in g.as_mut_slice().iter_mut().zip(contribution.as_slice()) {
                *a += b;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

impl<'a> Tape<'a> {
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

    /// Drops every recorded node. Handles issued before the call become foreign.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, requires_grad: bool) -> Var {
        let grad = match op {
            Op::Leaf if requires_grad => Some(Matrix::zeros(value.rows(), value.cols())),
            _ => None,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn push_op(
        &mut self,
        op_name: &'static str,
        value: Matrix,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Cow::Owned(value), op, requires_grad))
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignTensor);
        }
        Ok(v.idx)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Leaf that borrows its value for the lifetime of the tape.
    pub fn leaf_ref(&mut self, value: &'a Matrix, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// # Panics
    /// If `v` was not produced by this tape.
    pub fn value(&self, v: Var) -> &Matrix {
        let idx = self
            .check(v)
            .expect("value(): tensor does not belong to this tape");
        &self.nodes[idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v)
            .map(|i| self.nodes[i].requires_grad)
            .unwrap_or(false)
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        let idx = self.check(v).ok()?;
        self.nodes[idx].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Matrix> {
        let idx = self.check(v).ok()?;
        let node = &mut self.nodes[idx];
        let shape = node.value.shape();
        node.grad
            .as_mut()
            .map(|g| std::mem::replace(g, Matrix::zeros(shape.0, shape.1)))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        self.push_op("matmul", value, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.matmul_nt(&self.nodes[ib].value)?;
        self.push_op("matmul_nt", value, Op::MatMulNt(ia, ib), &[ia, ib])
    }

    fn elementwise_pair(
        &self,
        op: &'static str,
        ia: usize,
        ib: usize,
        allow_broadcast: bool,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Matrix, bool), TensorError> {
        let a = &self.nodes[ia].value;
        let b = &self.nodes[ib].value;
        if a.shape() == b.shape() {
            let data = a
                .as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok((Matrix::from_vec(a.rows(), a.cols(), data)?, false));
        }
        if allow_broadcast && b.rows() == 1 && b.cols() == a.cols() {
            let mut out = a.as_ref().clone();
            for r in 0..out.rows() {
                for (o, &y) in out.row_mut(r).iter_mut().zip(b.as_slice()) {
                    *o = f(*o, y);
                }
            }
            return Ok((out, true));
        }
        Err(TensorError::shape(op, a.shape(), b.shape()))
    }

    /// Elementwise sum; `b` may be a `1 × cols` row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (value, broadcast) = self.elementwise_pair("add", ia, ib, true, |x, y| x + y)?;
        self.push_op(
            "add",
            value,
            Op::Add {
                lhs: ia,
                rhs: ib,
                broadcast,
            },
            &[ia, ib],
        )
    }

    /// Elementwise difference; same broadcasting rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (value, broadcast) = self.elementwise_pair("sub", ia, ib, true, |x, y| x - y)?;
        self.push_op(
            "sub",
            value,
            Op::Sub {
                lhs: ia,
                rhs: ib,
                broadcast,
            },
            &[ia, ib],
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|v| v * factor);
        self.push_op("scale", value, Op::Scale(ia, factor), &[ia])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (value, _) = self.elementwise_pair("hadamard", ia, ib, false, |x, y| x * y)?;
        self.push_op("hadamard", value, Op::Hadamard(ia, ib), &[ia, ib])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(sigmoid);
        self.push_op("sigmoid", value, Op::Sigmoid(ia), &[ia])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(f64::tanh);
        self.push_op("tanh", value, Op::Tanh(ia), &[ia])
    }

    pub fn softmax_row(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if x.cols() == 0 || x.rows() == 0 {
            return Err(TensorError::Empty { op: "softmax_row" });
        }
        let value = softmax_rows(x);
        self.push_op("softmax_row", value, Op::SoftmaxRow(ia), &[ia])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.rows() != y.rows() {
            return Err(TensorError::shape("concat_cols", x.shape(), y.shape()));
        }
        let mut out = Matrix::zeros(x.rows(), x.cols() + y.cols());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            row[..x.cols()].copy_from_slice(x.row(r));
            row[x.cols()..].copy_from_slice(y.row(r));
        }
        self.push_op("concat_cols", out, Op::ConcatCols(ia, ib), &[ia, ib])
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        let mut out = Matrix::zeros(indices.len(), x.cols());
        for (r, &src) in indices.iter().enumerate() {
            if src >= x.rows() {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: src,
                    bound: x.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(x.row(src));
        }
        self.push_op(
            "gather_rows",
            out,
            Op::GatherRows(ia, indices.to_vec()),
            &[ia],
        )
    }

    /// `n × 1` cosine similarity between row `i` of `a` and row `i` of `b`
    /// (or the single row of `b` when it is `1 × cols`).
    pub fn cosine_sim_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let broadcast = if x.shape() == y.shape() {
            false
        } else if y.rows() == 1 && y.cols() == x.cols() {
            true
        } else {
            return Err(TensorError::shape("cosine_sim_rows", x.shape(), y.shape()));
        };
        let mut out = Matrix::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            let yr = if broadcast { y.row(0) } else { y.row(r) };
            out.set(r, 0, cosine(x.row(r), yr));
        }
        self.push_op(
            "cosine_sim_rows",
            out,
            Op::CosineSimRows {
                lhs: ia,
                rhs: ib,
                broadcast,
            },
            &[ia, ib],
        )
    }

    /// Fused softmax + cross-entropy of a `1 × n` logit row against class `target`.
    pub fn cross_entropy_with_softmax(
        &mut self,
        logits: Var,
        target: usize,
    ) -> Result<Var, TensorError> {
        let il = self.check(logits)?;
        let z = &self.nodes[il].value;
        if z.rows() != 1 {
            return Err(TensorError::shape(
                "cross_entropy_with_softmax",
                z.shape(),
                (1, z.cols()),
            ));
        }
        if z.cols() == 0 {
            return Err(TensorError::Empty {
                op: "cross_entropy_with_softmax",
            });
        }
        if target >= z.cols() {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy_with_softmax",
                index: target,
                bound: z.cols(),
            });
        }
        let loss = log_sum_exp(z.as_slice()) - z.get(0, target);
        self.push_op(
            "cross_entropy_with_softmax",
            Matrix::filled(1, 1, loss.max(0.0)),
            Op::CrossEntropy { logits: il, target },
            &[il],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.transpose();
        self.push_op("transpose", value, Op::Transpose(ia), &[ia])
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let value = Matrix::filled(1, 1, self.nodes[ia].value.sum());
        self.push_op("sum", value, Op::Sum(ia), &[ia])
    }

    /// Propagates `∂loss/∂·` to every `requires_grad` leaf, adding to any
    /// gradient already held there.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let il = self.check(loss)?;
        let shape = self.nodes[il].value.shape();
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if !self.nodes[il].value.is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        if !self.nodes[il].requires_grad {
            return Ok(());
        }

        let mut grads: Vec<Option<Matrix>> = vec![None; il + 1];
        grads[il] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=il).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                if let Some(g) = self.nodes[idx].grad.as_mut() {
                    g.add_assign(&upstream)?;
                }
                continue;
            }
            self.propagate(idx, &upstream, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(
        &self,
        idx: usize,
        up: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<(), TensorError> {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], up.matmul_nt(&nodes[*b].value)?);
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], nodes[*a].value.matmul_tn(up)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], up.matmul(&nodes[*b].value)?);
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], up.matmul_tn(&nodes[*a].value)?);
                }
            }
            Op::Add {
                lhs,
                rhs,
                broadcast,
            }
            | Op::Sub {
                lhs,
                rhs,
                broadcast,
            } => {
                let sign = if matches!(nodes[idx].op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                if wants(*lhs) {
                    accumulate(&mut grads[*lhs], up.clone());
                }
                if wants(*rhs) {
                    let mut g = if *broadcast {
                        column_sums(up)
                    } else {
                        up.clone()
                    };
                    if sign < 0.0 {
                        g.scale_in_place(-1.0);
                    }
                    accumulate(&mut grads[*rhs], g);
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], up.map(|v| v * f));
                }
            }
            Op::Hadamard(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if wants(*a) {
                    accumulate(&mut grads[*a], zip_map(up, vb, |g, y| g * y));
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], zip_map(up, va, |g, x| g * x));
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], zip_map(up, out, |g, y| g * y * (1.0 - y)));
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], zip_map(up, out, |g, y| g * (1.0 - y * y)));
                }
            }
            Op::SoftmaxRow(a) => {
                if wants(*a) {
                    let mut g = Matrix::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let u = up.row(r);
                        let dot: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
                        for (gv, (yv, uv)) in g.row_mut(r).iter_mut().zip(y.iter().zip(u)) {
                            *gv = yv * (uv - dot);
                        }
                    }
                    accumulate(&mut grads[*a], g);
                }
            }
            Op::ConcatCols(a, b) => {
                let left = nodes[*a].value.cols();
                if wants(*a) {
                    let mut g = Matrix::zeros(up.rows(), left);
                    for r in 0..up.rows() {
                        g.row_mut(r).copy_from_slice(&up.row(r)[..left]);
                    }
                    accumulate(&mut grads[*a], g);
                }
                if wants(*b) {
                    let mut g = Matrix::zeros(up.rows(), up.cols() - left);
                    for r in 0..up.rows() {
                        g.row_mut(r).copy_from_slice(&up.row(r)[left..]);
                    }
                    accumulate(&mut grads[*b], g);
                }
            }
            Op::GatherRows(a, indices) => {
                if wants(*a) {
                    let src = &nodes[*a].value;
                    let mut g = Matrix::zeros(src.rows(), src.cols());
                    for (r, &dst) in indices.iter().enumerate() {
                        for (gv, uv) in g.row_mut(dst).iter_mut().zip(up.row(r)) {
                            *gv += uv;
                        }
                    }
                    accumulate(&mut grads[*a], g);
                }
            }
            Op::CosineSimRows {
                lhs,
                rhs,
                broadcast,
            } => {
                let (x, y) = (&nodes[*lhs].value, &nodes[*rhs].value);
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                let mut gy = Matrix::zeros(y.rows(), y.cols());
                for r in 0..x.rows() {
                    let yr_idx = if *broadcast { 0 } else { r };
                    let (xr, yr) = (x.row(r), y.row(yr_idx));
                    let (dot, nx, ny) = cosine_parts(xr, yr);
                    if nx == 0.0 || ny == 0.0 {
                        continue;
                    }
                    let g = up.get(r, 0);
                    let cos = dot / (nx * ny);
                    let inv = 1.0 / (nx * ny);
                    for (k, gv) in gx.row_mut(r).iter_mut().enumerate() {
                        *gv += g * (yr[k] * inv - cos * xr[k] / (nx * nx));
                    }
                    for (k, gv) in gy.row_mut(yr_idx).iter_mut().enumerate() {
                        *gv += g * (xr[k] * inv - cos * yr[k] / (ny * ny));
                    }
                }
                if wants(*lhs) {
                    accumulate(&mut grads[*lhs], gx);
                }
                if wants(*rhs) {
                    accumulate(&mut grads[*rhs], gy);
                }
            }
            Op::CrossEntropy { logits, target } => {
                if wants(*logits) {
                    let mut g = softmax_rows(&nodes[*logits].value);
                    let v = g.get(0, *target);
                    g.set(0, *target, v - 1.0);
                    g.scale_in_place(up.get(0, 0));
                    accumulate(&mut grads[*logits], g);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], up.transpose());
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let (r, c) = nodes[*a].value.shape();
                    accumulate(&mut grads[*a], Matrix::filled(r, c, up.get(0, 0)));
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shapes checked on the forward pass")
}
