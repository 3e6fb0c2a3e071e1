//! Central-difference gradient oracle.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to check.

use super::array::DenseArray;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// max over coordinates of |analytic − central| / max(1, |central|)
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compare an analytic gradient against central differences of `value`.
///
/// The step for a coordinate with value `p` is `h · max(1, |p|)`.
pub fn fd_compare<F>(value: F, params: &[DenseArray], analytic: &[DenseArray], h: f64) -> Result<FdReport>
where
    F: Fn(&[DenseArray]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::dim("fd_compare", &[params.len()], &[analytic.len()]));
    }
    let mut probe = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::dim("fd_compare", grad.shape(), params[pi].shape()));
        }
        for ci in 0..params[pi].len() {
            let x = params[pi].data()[ci];
            let step = h * x.abs().max(1.0);
            probe[pi].set_flat(ci, x + step)?;
            let up = value(&probe)?;
            probe[pi].set_flat(ci, x - step)?;
            let down = value(&probe)?;
            probe[pi].set_flat(ci, x)?;
            let central = (up - down) / (2.0 * step);
            let err = (grad.data()[ci] - central).abs() / central.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, ci);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Gradient check for a graph built on a fresh tape.
///
/// `build` receives one leaf per parameter and returns a scalar node. The
/// analytic gradient comes from [`Tape::backward`]; the numeric one from
/// re-running `build` on perturbed values.
pub fn fd_check<F>(build: F, params: &[DenseArray], h: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = build(&mut tape, &leaves)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<DenseArray> = leaves
        .iter()
        .map(|v| grads.get(*v).cloned().unwrap_or_else(|| DenseArray::zeros(tape.value(*v).shape())))
        .collect();
    let value = |p: &[DenseArray]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = p.iter().map(|a| t.constant(a.clone())).collect();
        let r = build(&mut t, &vs)?;
        t.value(r).item()
    };
    fd_compare(value, params, &analytic, h)
}
