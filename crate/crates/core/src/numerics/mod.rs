//! Dense linear algebra and the differentiable pieces of the feedforward
//! topologies: affine layers, ReLU, sigmoid, masked binary cross-entropy,
//! inverted dropout and exact backpropagation.
//!
//! Everything is `f64` and single-threaded. Randomness is always passed in.

pub(crate) mod network;
mod sparse;

pub use network::{backprop, Backprop, BackpropOptions, Dense, LayerGrad, Network, NetworkGrad};
pub use sparse::CsrMatrix;

use rand::Rng;

use crate::error::{Error, Result};

/// Predictions are clamped to `[PRED_CLAMP, 1 - PRED_CLAMP]` before taking logs.
pub const PRED_CLAMP: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of squared entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise product, in place.
    pub fn hadamard_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "hadamard",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
        Ok(())
    }
}

/// `x · W + bias`, broadcasting the bias over rows.
pub fn affine_forward(x: &Matrix, weights: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if x.cols != weights.rows || bias.len() != weights.cols {
        return Err(Error::shape(
            "affine_forward",
            format!("x[b x {}], W[{} x o], bias[o]", weights.rows, weights.rows),
            format!(
                "x[{} x {}], W[{} x {}], bias[{}]",
                x.rows,
                x.cols,
                weights.rows,
                weights.cols,
                bias.len()
            ),
        ));
    }
    let mut out = Matrix::zeros(x.rows, weights.cols);
    for r in 0..x.rows {
        let out_row = out.row_mut(r);
        out_row.copy_from_slice(bias);
        for (k, &xv) in x.row(r).iter().enumerate() {
            // post-ReLU activations are frequently zero
            if xv == 0.0 {
                continue;
            }
            axpy(xv, weights.row(k), out_row);
        }
    }
    Ok(out)
}

/// Gradients of an affine layer given the upstream gradient `d_out`.
/// Returns `(d_weights, d_bias)`; `d_x` is computed separately by
/// [`affine_input_grad`] since the input layer never needs it.
pub(crate) fn affine_param_grad(x: &Matrix, d_out: &Matrix) -> (Matrix, Vec<f64>) {
    debug_assert_eq!(x.rows, d_out.rows);
    let mut d_w = Matrix::zeros(x.cols, d_out.cols);
    let mut d_b = vec![0.0; d_out.cols];
    for r in 0..x.rows {
        let g = d_out.row(r);
        for (acc, &v) in d_b.iter_mut().zip(g) {
            *acc += v;
        }
        for (k, &xv) in x.row(r).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            axpy(xv, g, d_w.row_mut(k));
        }
    }
    (d_w, d_b)
}

/// `d_out · Wᵀ`.
pub(crate) fn affine_input_grad(d_out: &Matrix, weights: &Matrix) -> Matrix {
    let mut d_x = Matrix::zeros(d_out.rows, weights.rows);
    for r in 0..d_out.rows {
        let g = d_out.row(r);
        let dst = d_x.row_mut(r);
        for (k, slot) in dst.iter_mut().enumerate() {
            *slot = dot(g, weights.row(k));
        }
    }
    d_x
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

/// A binary target that may be missing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Negative,
    Positive,
    Masked,
}

impl Label {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    /// Target value, or `None` when masked.
    #[inline]
    pub fn target(self) -> Option<f64> {
        match self {
            Label::Negative => Some(0.0),
            Label::Positive => Some(1.0),
            Label::Masked => None,
        }
    }

    pub fn is_observed(self) -> bool {
        self != Label::Masked
    }
}

/// Row-major `rows x cols` grid of labels (users by tasks).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Label>,
}

impl LabelMatrix {
    pub fn masked(rows: usize, cols: usize) -> Self {
        LabelMatrix {
            rows,
            cols,
            data: vec![Label::Masked; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<Label>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape(
                    "LabelMatrix::from_rows",
                    format!("{cols}"),
                    format!("{}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(LabelMatrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Label {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, l: Label) {
        self.data[r * self.cols + c] = l;
    }

    pub fn row(&self, r: usize) -> &[Label] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<Label> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Gathers the given rows and columns, in the given orders.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> LabelMatrix {
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            for &c in cols {
                data.push(self.get(r, c));
            }
        }
        LabelMatrix {
            rows: rows.len(),
            cols: cols.len(),
            data,
        }
    }
}

/// Masked binary cross-entropy for one head.
///
/// Returns the mean loss over unmasked rows and its gradient with respect to
/// `pred`. Masked rows get a gradient of exactly `0.0`; a fully masked batch
/// has loss 0.
pub fn bce_masked(pred: &Matrix, target: &[Label]) -> Result<(f64, Matrix)> {
    if pred.cols != 1 || pred.rows != target.len() {
        return Err(Error::shape(
            "bce_masked",
            format!("pred[{} x 1]", target.len()),
            format!("pred[{} x {}]", pred.rows, pred.cols),
        ));
    }
    let n = target.iter().filter(|l| l.is_observed()).count();
    let mut grad = Matrix::zeros(pred.rows, 1);
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for (i, label) in target.iter().enumerate() {
        let Some(y) = label.target() else { continue };
        let p = pred.data[i].clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad.data[i] = inv_n * ((1.0 - y) / (1.0 - p) - y / p);
    }
    Ok((loss * inv_n, grad))
}

/// Loss term of a single prediction, with the same clamp as [`bce_masked`].
#[inline]
pub(crate) fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut R,
) -> Result<Matrix> {
    check_dropout_rate(rate)?;
    if rate == 0.0 {
        return Ok(Matrix::filled(rows, cols, 1.0));
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    Ok(Matrix { rows, cols, data })
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidValue {
            key: "dropout_rate".into(),
            msg: format!("{rate} not in [0, 1)"),
        });
    }
    Ok(())
}
