use rand::Rng;

use super::{axpy, Matrix};
use crate::error::{Error, Result};

/// Compressed sparse row matrix. Feature vectors are mostly zero, so the
/// input layer works on this layout directly.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn empty(cols: usize) -> Self {
        CsrMatrix {
            rows: 0,
            cols,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Appends a row given as (column, value) pairs with strictly increasing columns.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) -> Result<()> {
        let start = self.indices.len();
        let mut last: Option<usize> = None;
        for (c, v) in entries {
            if c >= self.cols || last.is_some_and(|l| c <= l) {
                self.indices.truncate(start);
                self.values.truncate(start);
                return Err(Error::shape(
                    "CsrMatrix::push_row",
                    format!("increasing columns < {}", self.cols),
                    format!("column {c}"),
                ));
            }
            last = Some(c);
            if v != 0.0 {
                self.indices.push(c as u32);
                self.values.push(v);
            }
        }
        self.rows += 1;
        self.indptr.push(self.indices.len());
        Ok(())
    }

    /// Appends a dense row, storing only its non-zeros.
    pub fn push_dense_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::shape(
                "CsrMatrix::push_dense_row",
                format!("{}", self.cols),
                format!("{}", row.len()),
            ));
        }
        self.push_row(row.iter().copied().enumerate().filter(|(_, v)| *v != 0.0))
    }

    pub fn from_dense(m: &Matrix) -> Self {
        let mut out = CsrMatrix::empty(m.cols());
        for r in 0..m.rows() {
            out.push_dense_row(m.row(r)).expect("row width matches");
        }
        out
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let dst = m.row_mut(r);
            for (c, v) in self.row(r) {
                dst[c] = v;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Non-zero entries of row `r` as (column, value).
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .zip(&self.values[span])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn row_dense(&self, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (c, v) in self.row(r) {
            out[c] = v;
        }
        out
    }

    /// Gathers rows in the given order (duplicates allowed).
    pub fn select_rows(&self, rows: &[usize]) -> CsrMatrix {
        let nnz: usize = rows
            .iter()
            .map(|&r| self.indptr[r + 1] - self.indptr[r])
            .sum();
        let mut out = CsrMatrix {
            rows: 0,
            cols: self.cols,
            indptr: Vec::with_capacity(rows.len() + 1),
            indices: Vec::with_capacity(nnz),
            values: Vec::with_capacity(nnz),
        };
        out.indptr.push(0);
        for &r in rows {
            let span = self.indptr[r]..self.indptr[r + 1];
            out.indices.extend_from_slice(&self.indices[span.clone()]);
            out.values.extend_from_slice(&self.values[span]);
            out.indptr.push(out.indices.len());
            out.rows += 1;
        }
        out
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &CsrMatrix) -> Result<CsrMatrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "CsrMatrix::vstack",
                format!("{}", self.cols),
                format!("{}", other.cols),
            ));
        }
        let mut out = self.clone();
        let base = out.indices.len();
        out.indices.extend_from_slice(&other.indices);
        out.values.extend_from_slice(&other.values);
        out.indptr
            .extend(other.indptr[1..].iter().map(|p| p + base));
        out.rows += other.rows;
        Ok(out)
    }

    /// Inverted dropout restricted to stored entries; zeros stay zero under
    /// any mask, so drawing only for non-zeros gives the same distribution.
    pub fn apply_dropout<R: Rng + ?Sized>(&mut self, rate: f64, rng: &mut R) -> Result<()> {
        super::check_dropout_rate(rate)?;
        if rate == 0.0 {
            return Ok(());
        }
        let keep = 1.0 / (1.0 - rate);
        for v in &mut self.values {
            if rng.random::<f64>() < rate {
                *v = 0.0;
            } else {
                *v *= keep;
            }
        }
        Ok(())
    }

    /// `self · W + bias`.
    pub fn affine_forward(&self, weights: &Matrix, bias: &[f64]) -> Result<Matrix> {
        if self.cols != weights.rows() || bias.len() != weights.cols() {
            return Err(Error::shape(
                "sparse affine_forward",
                format!("x[b x {}], bias[{}]", weights.rows(), weights.cols()),
                format!("x[{} x {}], bias[{}]", self.rows, self.cols, bias.len()),
            ));
        }
        let mut out = Matrix::zeros(self.rows, weights.cols());
        for r in 0..self.rows {
            let dst = out.row_mut(r);
            dst.copy_from_slice(bias);
            for (c, v) in self.row(r) {
                axpy(v, weights.row(c), dst);
            }
        }
        Ok(out)
    }

    /// `selfᵀ · d_out`, plus the column sums of `d_out` for the bias.
    pub(crate) fn param_grad(&self, d_out: &Matrix) -> (Matrix, Vec<f64>) {
        debug_assert_eq!(self.rows, d_out.rows());
        let mut d_w = Matrix::zeros(self.cols, d_out.cols());
        let mut d_b = vec![0.0; d_out.cols()];
        for r in 0..self.rows {
            let g = d_out.row(r);
            for (acc, &v) in d_b.iter_mut().zip(g) {
                *acc += v;
            }
            for (c, v) in self.row(r) {
                axpy(v, g, d_w.row_mut(c));
            }
        }
        (d_w, d_b)
    }
}
