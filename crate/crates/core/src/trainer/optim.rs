//! Adam with bias correction and a warmup + cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::numkit::DenseArray;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam state for a fixed, ordered parameter list. Slots that never
/// receive a gradient keep no moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Option<DenseArray>>,
    pub v: Vec<Option<DenseArray>>,
}

impl Adam {
    pub fn new(slots: usize) -> Self {
        Self {
            t: 0,
            m: vec![None; slots],
            v: vec![None; slots],
        }
    }

    pub fn slots(&self) -> usize {
        self.m.len()
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut [&mut DenseArray], grads: &[Option<DenseArray>], lr: f64) -> Result<()> {
        if params.len() != self.slots() || grads.len() != self.slots() {
            return Err(Error::dim("adam", &[self.slots()], &[params.len(), grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::dim("adam", p.shape(), g.shape()));
                }
            }
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].get_or_insert_with(|| DenseArray::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| DenseArray::zeros(g.shape()));
            let mut next = p.data().to_vec();
            let mut mm = m.data().to_vec();
            let mut vv = v.data().to_vec();
            for (((x, mi), vi), gi) in next.iter_mut().zip(&mut mm).zip(&mut vv).zip(g.data()) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
            **p = DenseArray::new(p.shape().to_vec(), next)?;
            *m = DenseArray::new(g.shape().to_vec(), mm)?;
            *v = DenseArray::new(g.shape().to_vec(), vv)?;
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total: usize,
    pub warmup: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, total: usize, warmup_fraction: f64) -> Self {
        Self {
            peak,
            total,
            warmup: (warmup_fraction * total as f64).ceil() as usize,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
