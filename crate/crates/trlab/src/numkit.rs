//! Minimal deterministic numeric kernels shared by all modules.
//!
//! Everything is plain `f64` with fixed evaluation order, so identical
//! inputs produce bit-identical outputs across runs. No SIMD, no
//! mixed precision.

use crate::{Error, Result};

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `W x` for a row vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out[r] = acc;
        }
        out
    }

    /// `W^T g` for a vector `g` of length `rows`; used by reverse-mode passes.
    pub fn matvec_transpose(&self, g: &[f64]) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let gr = g[r];
            for (o, w) in out.iter_mut().zip(row) {
                *o += gr * w;
            }
        }
        out
    }

    /// Accumulate the outer product `g x^T` into this matrix (gradient update).
    pub fn add_outer(&mut self, g: &[f64], x: &[f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for r in 0..self.rows {
            let gr = g[r];
            let row = self.row_mut(r);
            for (w, xi) in row.iter_mut().zip(x) {
                *w += gr * xi;
            }
        }
    }
}

/// `W x + b`.
pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = w.matvec(x);
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    out
}

/// Numerically stable softmax with max-subtraction.
///
/// Output entries are in `[0, 1]` (entries far below the maximum can
/// underflow to zero) and sum to 1.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty input".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(out)
}

/// Log-domain softmax: `x_i - max - ln(sum exp(x - max))`.
///
/// Empty input yields an empty output.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    let log_z = max + sum.ln();
    logits.iter().map(|&x| x - log_z).collect()
}

/// Logistic sigmoid, computed branch-wise so large `|x|` never overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(sigmoid(x))`, stable for any finite `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `ln(1 - sigmoid(x))`, stable for any finite `x`.
pub fn log_one_minus_sigmoid(x: f64) -> f64 {
    -softplus(x)
}

/// `ln(sum exp(v_i))` with max-subtraction; all-(-inf) input yields -inf.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Two-argument log-sum-exp, the workhorse of the lattice recursions.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a >= b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Elementwise tanh.
pub fn tanh_inplace(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = x.tanh();
    }
}
