//! Dense row-major matrices and the handful of numeric kernels the network
//! is built from.
//!
//! Parameters are stored as `f32`. Activations and every dot product are
//! carried in `f64`, which keeps finite-difference gradient checks tight
//! while the stored weights keep the width the browser client reads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "tensor data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "tensor",
                format!("non-finite element at flat index {pos}"),
            ));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Argument("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_finite(self, op: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::numeric(op, "result contains NaN or infinity"))
        }
    }
}

/// Matrix product with `f64` accumulation.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            lhs: a.shape(),
            rhs: b.shape(),
            context: "matmul requires lhs.cols == rhs.rows",
        });
    }
    let mut out = Tensor2::zeros(a.rows, b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (k, &aik) in a.row(i).iter().enumerate() {
            let aik = aik as f64;
            for (slot, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *slot += aik * bkj as f64;
            }
        }
        for (o, &v) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    out.check_finite("matmul")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

pub fn unary(op: UnaryOp, t: &Tensor2) -> Tensor2 {
    let f = match op {
        UnaryOp::Sigmoid => sigmoid,
        UnaryOp::Tanh => f64::tanh,
    };
    Tensor2 {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|&v| f(v as f64) as f32).collect(),
    }
}

pub fn binary(op: BinaryOp, a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            lhs: a.shape(),
            rhs: b.shape(),
            context: "elementwise operands must have equal shapes",
        });
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Mul => x * y,
        })
        .collect();
    Tensor2 {
        rows: a.rows,
        cols: a.cols,
        data,
    }
    .check_finite("elementwise")
}

/// Logistic function, evaluated on the side that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("softmax input is not finite".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Max-subtracted softmax over a finite, non-empty slice.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Cross-entropy of one logit row against `target`.
///
/// Overwrites `row` with `softmax(row) - onehot(target)` (the gradient of the
/// loss with respect to the logits) and returns the loss.
pub(crate) fn cross_entropy_row(row: &mut [f64], target: usize) -> f64 {
    let target_logit = row[target];
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    row[target] -= 1.0;
    max + sum.ln() - target_logit
}

/// Mean cross-entropy over the rows whose mask is set.
///
/// Returns the loss and its exact gradient with respect to `logits`; rows
/// with a false mask contribute nothing and receive an all-zero gradient.
pub fn masked_cross_entropy(
    logits: &Tensor2,
    targets: &[u32],
    mask: &[bool],
) -> Result<(f64, Tensor2)> {
    let (t, v) = logits.shape();
    if targets.len() != t || mask.len() != t {
        return Err(Error::Argument(format!(
            "{t} logit rows but {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(Error::Argument(
            "degenerate batch: no unmasked positions".into(),
        ));
    }
    let scale = 1.0 / active as f64;
    let mut loss = 0.0;
    let mut grad = Tensor2::zeros(t, v);
    let mut row = vec![0.0f64; v];
    for r in 0..t {
        if !mask[r] {
            continue;
        }
        let target = targets[r] as usize;
        if target >= v {
            return Err(Error::Argument(format!(
                "target id {target} out of range for {v} classes"
            )));
        }
        for (dst, &src) in row.iter_mut().zip(logits.row(r)) {
            *dst = src as f64;
        }
        loss += cross_entropy_row(&mut row, target);
        for (g, &d) in grad.row_mut(r).iter_mut().zip(&row) {
            *g = (d * scale) as f32;
        }
    }
    Ok((loss * scale, grad))
}

/// Dot product of stored weights against an activation vector.
#[inline]
pub(crate) fn dot(w: &[f32], x: &[f64]) -> f64 {
    debug_assert_eq!(w.len(), x.len());
    let mut acc = [0.0f64; 4];
    let wc = w.chunks_exact(4);
    let xc = x.chunks_exact(4);
    let (wr, xr) = (wc.remainder(), xc.remainder());
    for (a, b) in wc.zip(xc) {
        acc[0] += a[0] as f64 * b[0];
        acc[1] += a[1] as f64 * b[1];
        acc[2] += a[2] as f64 * b[2];
        acc[3] += a[3] as f64 * b[3];
    }
    let mut tail = 0.0;
    for (a, b) in wr.iter().zip(xr) {
        tail += *a as f64 * b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * w` for a stored weight row.
#[inline]
pub(crate) fn axpy_weights(y: &mut [f64], alpha: f64, w: &[f32]) {
    debug_assert_eq!(y.len(), w.len());
    for (a, &b) in y.iter_mut().zip(w) {
        *a += alpha * b as f64;
    }
}

/// `y += alpha * x` for activations.
#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (a, &b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}
