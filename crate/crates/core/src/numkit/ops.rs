//! Value-level kernels shared by the tape and the non-differentiable paths.

use super::array::{finish, DenseArray};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Max-shifted softmax of a slice. Callers ensure the slice is nonempty.
pub(crate) fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub(crate) fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn cross_entropy_row(z: &[f64], target: usize) -> f64 {
    logsumexp(z) - z[target]
}

/// Softmax of a logit vector.
pub fn softmax(z: &DenseArray) -> Result<DenseArray> {
    if z.is_empty() {
        return Err(Error::dim("softmax", z.shape(), &[1]));
    }
    if z.rank() > 1 {
        return Err(Error::dim("softmax", z.shape(), &[z.len()]));
    }
    finish("softmax", z.shape().to_vec(), softmax_slice(z.data()))
}

/// Row-wise softmax of a matrix (or a vector as one row).
pub fn softmax_rows(z: &DenseArray) -> Result<DenseArray> {
    if z.is_empty() || z.cols() == 0 {
        return Err(Error::dim("softmax_rows", z.shape(), &[1]));
    }
    let cols = z.cols();
    let mut out = Vec::with_capacity(z.len());
    for r in 0..z.rows() {
        out.extend(softmax_slice(&z.data()[r * cols..(r + 1) * cols]));
    }
    finish("softmax_rows", z.shape().to_vec(), out)
}

/// Shannon entropy in nats of a probability vector; `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}
