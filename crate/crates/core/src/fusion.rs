//! Weighted inter-layer fusion and the per-patch MLP connector.
//!
//! Fusion keeps the token budget: `P` fused tokens regardless of `L`.

use crate::encoder::LayerStack;
use crate::error::{Error, Result};
use crate::nn::{self, BoundMlp, Mlp};
use crate::numkit::{DenseArray, Tape, Var};

const SIMPLEX_TOL: f64 = 1e-6;

/// Per-patch MLP mapping `D_v → D_dec`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectorParams {
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    /// `[P×D_dec]` after the connector
    pub tokens: DenseArray,
    /// `[P×D_v]` fused feature before the connector
    pub raw: DenseArray,
}

impl ConnectorParams {
    pub fn new(mlp: Mlp) -> Self {
        Self { mlp }
    }

    /// Two-layer connector `D_v → D_dec → D_dec` with fan-in Gaussian weights.
    pub fn init(width: usize, dec_dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::init(&[width, dec_dim, dec_dim], &mut nn::rng(seed), false)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn named(&self) -> Vec<(String, &DenseArray)> {
        self.mlp.named("connector.mlp")
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        self.mlp.named_mut("connector.mlp")
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        self.mlp.bind(tape, trainable)
    }
}

fn check_weights(w: &DenseArray, layers: usize) -> Result<()> {
    if w.rank() != 1 || w.len() != layers {
        return Err(Error::dim("fuse", w.shape(), &[layers]));
    }
    if !w.is_on_simplex(SIMPLEX_TOL) {
        return Err(Error::Contract(format!(
            "fusion weights off the simplex (sum {})",
            w.sum()
        )));
    }
    Ok(())
}

/// `F_fused[p,d] = Σ_l w_l · F_l[p,d]`, returned as `[P×D_v]`.
pub fn fuse(stack: &LayerStack, w: &DenseArray) -> Result<DenseArray> {
    let d = stack.dims();
    check_weights(w, d.layers)?;
    let flat = stack.patch_features().reshape(&[d.layers, d.patches * d.width])?;
    let row = w.reshape(&[1, d.layers])?;
    row.matmul(&flat)?.reshape(&[d.patches, d.width])
}

/// Differentiable single-sample fusion: `w: [L]`, `stack: [L×P×D_v]` (both
/// may be leaves), output `[P×D_v]`.
pub fn fuse_on_tape(tape: &mut Tape, stack: Var, w: Var) -> Result<Var> {
    let ss = tape.value(stack).shape().to_vec();
    if ss.len() != 3 {
        return Err(Error::dim("fuse", &ss, &[3]));
    }
    check_weights(tape.value(w), ss[0])?;
    let flat = tape.reshape(stack, &[ss[0], ss[1] * ss[2]])?;
    let row = tape.reshape(w, &[1, ss[0]])?;
    let mixed = tape.matmul(row, flat)?;
    tape.reshape(mixed, &[ss[1], ss[2]])
}

/// Apply the connector to every patch of `raw: [P×D_v]`.
pub fn connect(params: &ConnectorParams, raw: &DenseArray) -> Result<DenseArray> {
    if raw.rank() != 2 || raw.shape()[1] != params.input_dim() {
        return Err(Error::dim("connect", raw.shape(), &[params.input_dim()]));
    }
    params.mlp.apply(raw)
}

pub fn fuse_and_connect(stack: &LayerStack, w: &DenseArray, params: &ConnectorParams) -> Result<FusedFeature> {
    let raw = fuse(stack, w)?;
    let tokens = connect(params, &raw)?;
    Ok(FusedFeature { tokens, raw })
}
