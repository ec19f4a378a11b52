//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Graph`] is a write-once tape: every operation appends a node holding its
//! forward value, and [`Graph::backward`] walks the tape in reverse. Vectors are
//! `[1, n]` matrices and scalars are `[1, 1]`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `[1, 1]` matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        gemm(self, false, other, false)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `op(a) * op(b)` where `op` optionally transposes, without materializing the transpose.
fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Matrix {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: the strides describe exactly the row-major buffers owned by `a`, `b`
    // and `out`, whose lengths were checked against (m, k) and (k, n) above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// A fixed sparse linear map applied independently to every row of its input.
#[derive(Clone, Debug)]
pub struct SparseMap {
    in_len: usize,
    out_len: usize,
    entries: Vec<Vec<(u32, f64)>>,
}

impl SparseMap {
    pub fn new(in_len: usize, entries: Vec<Vec<(u32, f64)>>) -> Self {
        Self { in_len, out_len: entries.len(), entries }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.entries) {
            *o = row.iter().map(|&(i, w)| w * input[i as usize]).sum();
        }
    }

    fn apply_adjoint(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (g, row) in grad_out.iter().zip(&self.entries) {
            if *g != 0.0 {
                for &(i, w) in row {
                    grad_in[i as usize] += w * g;
                }
            }
        }
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &SparseMap) -> SparseMap {
        assert_eq!(self.in_len, inner.out_len);
        let entries = self
            .entries
            .iter()
            .map(|row| {
                let mut acc: Vec<(u32, f64)> = Vec::new();
                for &(mid, w) in row {
                    for &(i, v) in &inner.entries[mid as usize] {
                        match acc.iter_mut().find(|(j, _)| *j == i) {
                            Some(slot) => slot.1 += w * v,
                            None => acc.push((i, w * v)),
                        }
                    }
                }
                acc.sort_by_key(|e| e.0);
                acc
            })
            .collect();
        SparseMap { in_len: inner.in_len, out_len: self.out_len, entries }
    }
}

/// Channel-major `[3, H, W]` image held outside the tape.
#[derive(Clone, Debug)]
pub struct PixelPlanes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleBy(Var, Var),
    ShiftBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sum(Var),
    ColSums(Var),
    RowSums(Var),
    DivRows(Var, Var),
    NormalizeRows(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    Diagonal(Var),
    Sparse(Var, Arc<SparseMap>),
    SoftThreshold { x: Var, temperature: f64 },
    RelaxedBernoulli { z: Var, temperature: f64 },
    StraightThrough(Var),
    MaskedPatches { mask: Var, image: Arc<PixelPlanes>, patch: usize },
}

struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Tape of operations. Build the forward pass with the methods below, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
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

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub mod scalar {
    pub fn sigmoid(x: f64) -> f64 {
        super::sigmoid(x)
    }

    pub fn softplus(x: f64) -> f64 {
        super::softplus(x)
    }
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

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let t = self.tracked(a);
        self.push(value, op, t)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Matrix { rows: va.rows, cols: va.cols, data };
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, op, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `[m, n] + [1, n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1);
        assert_eq!(va.cols, vr.cols);
        let mut value = va.clone();
        for r in 0..value.rows {
            for (x, y) in value.row_mut(r).iter_mut().zip(&vr.data) {
                *x += y;
            }
        }
        let t = self.tracked(a) || self.tracked(row);
        self.push(value, Op::AddRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    /// Adds a constant matrix of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape());
        let mut value = va.clone();
        value.add_assign(c);
        let t = self.tracked(a);
        self.push(value, Op::AddConst(a), t)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddConst(a), |x| x + c)
    }

    /// `a * s` with `s` a `[1, 1]` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let value = self.value(a).map(|x| x * k);
        let t = self.tracked(a) || self.tracked(s);
        self.push(value, Op::ScaleBy(a, s), t)
    }

    /// `a + s` with `s` a `[1, 1]` node.
    pub fn shift_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let value = self.value(a).map(|x| x + k);
        let t = self.tracked(a) || self.tracked(s);
        self.push(value, Op::ShiftBy(a, s), t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = gemm(self.value(a), false, self.value(b), false);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(a);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let t = self.tracked(a);
        self.push(Matrix::scalar(s), Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[m, n] -> [1, n]`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = vec![0.0; va.cols];
        for r in 0..va.rows {
            for (o, x) in out.iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        let t = self.tracked(a);
        self.push(Matrix::row_vector(out), Op::ColSums(a), t)
    }

    /// `[m, n] -> [m, 1]`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data: Vec<f64> = (0..va.rows).map(|r| va.row(r).iter().sum()).collect();
        let value = Matrix { rows: va.rows, cols: 1, data };
        let t = self.tracked(a);
        self.push(value, Op::RowSums(a), t)
    }

    /// Divides row `r` of `a` by `d[r, 0]`.
    pub fn div_rows(&mut self, a: Var, d: Var) -> Var {
        let (va, vd) = (self.value(a), self.value(d));
        assert_eq!(vd.shape(), (va.rows, 1));
        let mut value = va.clone();
        for r in 0..value.rows {
            let k = vd.data[r];
            for x in value.row_mut(r) {
                *x /= k;
            }
        }
        let t = self.tracked(a) || self.tracked(d);
        self.push(value, Op::DivRows(a, d), t)
    }

    /// Each row scaled to unit L2 norm; `eps` guards the zero row.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            for x in row {
                *x /= n;
            }
        }
        let t = self.tracked(a);
        self.push(value, Op::NormalizeRows(a, eps), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row {
                *x /= z;
            }
        }
        let t = self.tracked(a);
        self.push(value, Op::SoftmaxRows(a), t)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row {
                *x -= lse;
            }
        }
        let t = self.tracked(a);
        self.push(value, Op::LogSoftmaxRows(a), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut t = false;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
            t |= self.tracked(p);
        }
        self.push(Matrix { rows, cols, data }, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * va.cols);
        for &i in idx {
            data.extend_from_slice(va.row(i));
        }
        let value = Matrix { rows: idx.len(), cols: va.cols, data };
        let t = self.tracked(a);
        self.push(value, Op::SelectRows(a, idx.to_vec()), t)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.select_rows(a, &[i])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), rows * cols);
        let value = Matrix { rows, cols, data: va.data.clone() };
        let t = self.tracked(a);
        self.push(value, Op::Reshape(a), t)
    }

    /// Diagonal of a square matrix as `[1, n]`.
    pub fn diagonal(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows, va.cols);
        let data = (0..va.rows).map(|i| va.get(i, i)).collect();
        let t = self.tracked(a);
        self.push(Matrix::row_vector(data), Op::Diagonal(a), t)
    }

    pub fn sparse(&mut self, a: Var, map: &Arc<SparseMap>) -> Var {
        let va = self.value(a);
        assert_eq!(va.cols, map.in_len, "sparse map input length");
        let mut value = Matrix::zeros(va.rows, map.out_len);
        for r in 0..va.rows {
            map.apply(va.row(r), value.row_mut(r));
        }
        let t = self.tracked(a);
        self.push(value, Op::Sparse(a, Arc::clone(map)), t)
    }

    /// Per row: min-max normalize to `[0, 1]` then `sigmoid((n - theta) / temperature)`.
    /// A constant row maps to 0.5 everywhere.
    pub fn soft_threshold_rows(&mut self, a: Var, theta: f64, temperature: f64) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let (lo, hi) = min_max(row);
            let range = hi.1 - lo.1;
            for x in row.iter_mut() {
                *x = if range > 0.0 { sigmoid(((*x - lo.1) / range - theta) / temperature) } else { 0.5 };
            }
        }
        let t = self.tracked(a);
        self.push(value, Op::SoftThreshold { x: a, temperature }, t)
    }

    /// `sigmoid((z + noise) / temperature)`, the binary-concrete relaxation.
    pub fn relaxed_bernoulli(&mut self, z: Var, noise: &Matrix, temperature: f64) -> Var {
        let vz = self.value(z);
        assert_eq!(vz.shape(), noise.shape());
        let data = vz.data.iter().zip(&noise.data).map(|(&a, &n)| sigmoid((a + n) / temperature)).collect();
        let value = Matrix { rows: vz.rows, cols: vz.cols, data };
        let t = self.tracked(z);
        self.push(value, Op::RelaxedBernoulli { z, temperature }, t)
    }

    /// Forward: `1` where the input is `>= 0.5`, else `0`. Backward: identity.
    pub fn straight_through(&mut self, a: Var) -> Var {
        self.unary(a, Op::StraightThrough(a), |x| if x >= 0.5 { 1.0 } else { 0.0 })
    }

    /// Multiplies every channel of `image` by `mask` (`[1, H*W]`) and cuts the
    /// result into non-overlapping `patch x patch` tiles, one tile per output row.
    pub fn masked_patches(&mut self, mask: Var, image: &Arc<PixelPlanes>, patch: usize) -> Var {
        let vm = self.value(mask);
        let (h, w) = (image.height, image.width);
        assert_eq!(vm.len(), h * w, "mask must cover the image");
        let value = patchify(&image.data, image.channels, h, w, patch, Some(&vm.data));
        let t = self.tracked(mask);
        self.push(value, Op::MaskedPatches { mask, image: Arc::clone(image), patch }, t)
    }

    /// Reverse pass from a `[1, 1]` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.tracked {
                self.propagate(idx, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let elementwise = |v: Var, f: &dyn Fn(usize) -> f64| -> Matrix {
            let data = (0..g.data.len()).map(|i| g.data[i] * f(i)).collect();
            let _ = v;
            Matrix { rows: g.rows, cols: g.cols, data }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, elementwise(*a, &|i| vb.data[i]));
                acc(*b, elementwise(*b, &|i| va.data[i]));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut gr = vec![0.0; g.cols];
                for r in 0..g.rows {
                    for (s, x) in gr.iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                acc(*row, Matrix::row_vector(gr));
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * k)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::ScaleBy(a, s) => {
                let k = self.value(*s).item();
                acc(*a, g.map(|x| x * k));
                let va = self.value(*a);
                let d: f64 = g.data.iter().zip(&va.data).map(|(x, y)| x * y).sum();
                acc(*s, Matrix::scalar(d));
            }
            Op::ShiftBy(a, s) => {
                acc(*a, g.clone());
                acc(*s, Matrix::scalar(g.data.iter().sum()));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    acc(*a, gemm(g, false, vb, true));
                }
                if self.tracked(*b) {
                    acc(*b, gemm(va, true, g, false));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Tanh(a) => acc(*a, elementwise(*a, &|i| 1.0 - out.data[i] * out.data[i])),
            Op::Sigmoid(a) => acc(*a, elementwise(*a, &|i| out.data[i] * (1.0 - out.data[i]))),
            Op::Softplus(a) => {
                let va = self.value(*a);
                acc(*a, elementwise(*a, &|i| sigmoid(va.data[i])));
            }
            Op::Exp(a) => acc(*a, elementwise(*a, &|i| out.data[i])),
            Op::Log(a) => {
                let va = self.value(*a);
                acc(*a, elementwise(*a, &|i| 1.0 / va.data[i]));
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                acc(*a, elementwise(*a, &|i| va.data[i].signum() * (va.data[i] != 0.0) as u8 as f64));
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::ColSums(a) => {
                let (r, c) = self.shape(*a);
                let mut m = Matrix::zeros(r, c);
                for i in 0..r {
                    m.row_mut(i).copy_from_slice(&g.data);
                }
                acc(*a, m);
            }
            Op::RowSums(a) => {
                let (r, c) = self.shape(*a);
                let mut m = Matrix::zeros(r, c);
                for i in 0..r {
                    m.row_mut(i).fill(g.data[i]);
                }
                acc(*a, m);
            }
            Op::DivRows(a, d) => {
                let (va, vd) = (self.value(*a), self.value(*d));
                let mut ga = g.clone();
                let mut gd = vec![0.0; va.rows];
                for r in 0..va.rows {
                    let k = vd.data[r];
                    let mut dot = 0.0;
                    for (c, x) in ga.row_mut(r).iter_mut().enumerate() {
                        dot += *x * va.get(r, c);
                        *x /= k;
                    }
                    gd[r] = -dot / (k * k);
                }
                acc(*a, ga);
                acc(*d, Matrix { rows: va.rows, cols: 1, data: gd });
            }
            Op::NormalizeRows(a, eps) => {
                let va = self.value(*a);
                let mut ga = Matrix::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    let x = va.row(r);
                    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gr = g.row(r);
                    let dst = ga.row_mut(r);
                    if n <= *eps {
                        for (d, gv) in dst.iter_mut().zip(gr) {
                            *d = gv / eps;
                        }
                        continue;
                    }
                    let y = out.row(r);
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    for c in 0..x.len() {
                        dst[c] = (gr[c] - y[c] * dot) / n;
                    }
                }
                acc(*a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    for (c, d) in ga.row_mut(r).iter_mut().enumerate() {
                        *d = y[c] * (gr[c] - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let total: f64 = gr.iter().sum();
                    for (c, d) in ga.row_mut(r).iter_mut().enumerate() {
                        *d = gr[c] - y[c].exp() * total;
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let data = g.data[offset * c..(offset + r) * c].to_vec();
                    acc(p, Matrix { rows: r, cols: c, data });
                    offset += r;
                }
            }
            Op::SelectRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (d, s) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += s;
                    }
                }
                acc(*a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix { rows: r, cols: c, data: g.data.clone() });
            }
            Op::Diagonal(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.set(i, i, g.data[i]);
                }
                acc(*a, ga);
            }
            Op::Sparse(a, map) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    map.apply_adjoint(g.row(i), ga.row_mut(i));
                }
                acc(*a, ga);
            }
            Op::SoftThreshold { x, temperature, .. } => {
                let vx = self.value(*x);
                let mut ga = Matrix::zeros(vx.rows, vx.cols);
                for r in 0..vx.rows {
                    let row = vx.row(r);
                    let (lo, hi) = min_max(row);
                    let range = hi.1 - lo.1;
                    if range <= 0.0 {
                        continue;
                    }
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dst = ga.row_mut(r);
                    let (mut to_min, mut to_max) = (0.0, 0.0);
                    for c in 0..row.len() {
                        let gn = gr[c] * y[c] * (1.0 - y[c]) / temperature;
                        let n = (row[c] - lo.1) / range;
                        dst[c] += gn / range;
                        to_min += gn * (n - 1.0) / range;
                        to_max -= gn * n / range;
                    }
                    dst[lo.0] += to_min;
                    dst[hi.0] += to_max;
                }
                acc(*x, ga);
            }
            Op::RelaxedBernoulli { z, temperature } => {
                acc(*z, elementwise(*z, &|i| out.data[i] * (1.0 - out.data[i]) / temperature));
            }
            Op::StraightThrough(a) => acc(*a, g.clone()),
            Op::MaskedPatches { mask, image, patch } => {
                let (h, w) = (image.height, image.width);
                let mut gm = vec![0.0; h * w];
                let p = *patch;
                let gw = w / p;
                for (pi, grow) in (0..g.rows).map(|r| (r, g.row(r))) {
                    let (py, px) = (pi / gw, pi % gw);
                    for ch in 0..image.channels {
                        for dy in 0..p {
                            for dx in 0..p {
                                let (y, x) = (py * p + dy, px * p + dx);
                                let col = ch * p * p + dy * p + dx;
                                gm[y * w + x] += grow[col] * image.data[ch * h * w + y * w + x];
                            }
                        }
                    }
                }
                acc(*mask, Matrix { rows: 1, cols: h * w, data: gm });
            }
        }
    }
}

/// (index, value) of the first minimum and first maximum.
fn min_max(row: &[f64]) -> ((usize, f64), (usize, f64)) {
    let mut lo = (0, row[0]);
    let mut hi = (0, row[0]);
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x < lo.1 {
            lo = (i, x);
        }
        if x > hi.1 {
            hi = (i, x);
        }
    }
    (lo, hi)
}

/// Cuts a channel-major image into `patch x patch` tiles (row-major tile order),
/// optionally multiplying every channel by a `[H*W]` mask first.
pub fn patchify(
    data: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    patch: usize,
    mask: Option<&[f64]>,
) -> Matrix {
    let (gh, gw) = (h / patch, w / patch);
    let cols = channels * patch * patch;
    let mut out = Matrix::zeros(gh * gw, cols);
    for py in 0..gh {
        for px in 0..gw {
            let row = out.row_mut(py * gw + px);
            for ch in 0..channels {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let (y, x) = (py * patch + dy, px * patch + dx);
                        let m = mask.map_or(1.0, |m| m[y * w + x]);
                        row[ch * patch * patch + dy * patch + dx] = m * data[ch * h * w + y * w + x];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `build` w.r.t. every entry of `inputs`.
    fn check(inputs: Vec<Matrix>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|m| g.param(m)).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let eval = |ins: &[Matrix]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().cloned().map(|m| g.param(m)).collect();
            let l = build(&mut g, &vars);
            g.value(l).item()
        };
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], m.shape());
            for i in 0..m.len() {
                let mut plus = inputs.clone();
                plus[k].data[i] += h;
                let mut minus = inputs.clone();
                minus[k].data[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.data[i];
                let tol = 1e-6_f64.max(1e-5 * fd.abs().max(an.abs()));
                assert!((fd - an).abs() <= tol, "input {k}[{i}]: fd {fd} vs analytic {an}");
            }
        }
    }

    fn m(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_matches_naive() {
        let a = m(3, 4, 1);
        let b = m(4, 2, 2);
        let c = a.matmul(&b);
        for i in 0..3 {
            for j in 0..2 {
                let e: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - e).abs() < 1e-12);
            }
        }
        let ct = gemm(&b, true, &a, true);
        assert_eq!(ct.shape(), (2, 3));
        for i in 0..3 {
            for j in 0..2 {
                assert!((ct.get(j, i) - c.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_dense_chain() {
        check(vec![m(3, 4, 1), m(4, 2, 2), m(1, 2, 3)], |g, v| {
            let x = g.matmul(v[0], v[1]);
            let x = g.add_row(x, v[2]);
            let x = g.tanh(x);
            let y = g.sigmoid(x);
            let z = g.softplus(y);
            let t = g.transpose(z);
            let e = g.exp(t);
            let l = g.log(e);
            let s = g.mul(l, l);
            g.sum(s)
        });
    }

    #[test]
    fn grad_softmax_family() {
        check(vec![m(3, 5, 4)], |g, v| {
            let s = g.softmax_rows(v[0]);
            let w = g.constant(m(3, 5, 9));
            let p = g.mul(s, w);
            let ls = g.log_softmax_rows(v[0]);
            let d = g.scale(ls, 0.3);
            let q = g.add(p, d);
            let n = g.normalize_rows(q, 1e-12);
            let r = g.row_sums(n);
            let c = g.col_sums(v[0]);
            let a = g.sum(r);
            let b = g.sum(c);
            let b = g.abs(b);
            g.add(a, b)
        });
    }

    #[test]
    fn grad_structural_ops() {
        check(vec![m(3, 3, 5), m(3, 1, 6), m(1, 1, 7)], |g, v| {
            let d = g.add_scalar(v[1], 3.0);
            let x = g.div_rows(v[0], d);
            let diag = g.diagonal(x);
            let sel = g.select_rows(x, &[2, 0, 2]);
            let cat = g.concat_rows(&[sel, diag]);
            let r = g.reshape(cat, 2, 6);
            let sc = g.scale_by(r, v[2]);
            let sh = g.shift_by(sc, v[2]);
            let sq = g.mul(sh, sh);
            let k = g.sub(sq, r);
            g.mean(k)
        });
    }

    #[test]
    fn grad_soft_threshold_and_relaxed() {
        let noise = m(2, 6, 11);
        check(vec![m(2, 6, 8), m(1, 1, 10)], move |g, v| {
            let st = g.soft_threshold_rows(v[0], 0.5, 0.3);
            let z = g.scale_by(v[0], v[1]);
            let rb = g.relaxed_bernoulli(z, &noise, 0.5);
            let p = g.mul(st, rb);
            g.sum(p)
        });
    }

    #[test]
    fn soft_threshold_constant_row() {
        let mut g = Graph::new();
        let x = g.param(Matrix::filled(1, 4, 3.0));
        let y = g.soft_threshold_rows(x, 0.5, 0.1);
        assert!(g.value(y).data().iter().all(|&v| v == 0.5));
        let s = g.sum(y);
        let gr = g.backward(s);
        assert!(gr.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_sparse_and_patches() {
        let map = Arc::new(SparseMap::new(
            4,
            vec![vec![(0, 0.5), (1, 0.5)], vec![(2, 1.0)], vec![(1, 0.25), (3, 0.75)], vec![], vec![(0, 2.0)], vec![(3, -1.0)]],
        ));
        let img = Arc::new(PixelPlanes { channels: 2, height: 2, width: 4, data: m(1, 16, 12).into_data() });
        check(vec![m(2, 4, 13)], move |g, v| {
            let s = g.sparse(v[0], &map);
            let sq = g.mul(s, s);
            let a = g.sum(sq);
            let mk = g.reshape(v[0], 1, 8);
            let p = g.masked_patches(mk, &img, 2);
            let t = g.tanh(p);
            let b = g.sum(t);
            g.add(a, b)
        });
    }

    #[test]
    fn straight_through_is_hard_forward_identity_backward() {
        let mut g = Graph::new();
        let x = g.param(Matrix::row_vector(vec![0.2, 0.5, 0.9]));
        let y = g.straight_through(x);
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 1.0]);
        let w = g.constant(Matrix::row_vector(vec![1.0, 2.0, 3.0]));
        let p = g.mul(y, w);
        let s = g.sum(p);
        let gr = g.backward(s);
        assert_eq!(gr.get(x).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn sparse_compose_matches_sequential() {
        let a = SparseMap::new(3, vec![vec![(0, 1.0), (2, 2.0)], vec![(1, 0.5)]]);
        let b = SparseMap::new(2, vec![vec![(0, 1.0)], vec![(1, 3.0), (0, 1.0)], vec![(1, -1.0)]]);
        let c = a.compose(&b);
        let x = [0.3, -0.7];
        let mut mid = [0.0; 3];
        b.apply(&x, &mut mid);
        let mut y1 = [0.0; 2];
        a.apply(&mid, &mut y1);
        let mut y2 = [0.0; 2];
        c.apply(&x, &mut y2);
        for (p, q) in y1.iter().zip(&y2) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
