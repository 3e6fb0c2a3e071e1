//! Dense layers shared by the router, connector and decoder head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numkit::{DenseArray, Tape, Var};

/// Affine map `x·W + b` with `W: [in×out]`, `b: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DenseArray,
    pub bias: DenseArray,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(weight: DenseArray, bias: DenseArray) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.shape()[1] != bias.len() {
            return Err(Error::dim("linear", weight.shape(), bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: DenseArray::zeros(&[fan_in, fan_out]),
            bias: DenseArray::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
}

impl Mlp {
    pub fn new(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::dim("mlp", pair[0].weight.shape(), pair[1].weight.shape()));
            }
        }
        Ok(Self { layers })
    }

    /// Widths `[in, h1, …, out]`; hidden layers get `N(0, 1/fan_in)` weights,
    /// the final layer is zero when `zero_final` is set.
    pub fn init(widths: &[usize], rng: &mut ChaCha8Rng, zero_final: bool) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Contract("an MLP needs input and output widths".into()));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fi, fo) = (widths[i], widths[i + 1]);
                if zero_final && i + 1 == n {
                    Ok(Linear::zeros(fi, fo))
                } else {
                    Ok(Linear {
                        weight: gaussian(rng, &[fi, fo], 1.0 / (fi as f64).sqrt())?,
                        bias: DenseArray::zeros(&[fo]),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        self.bind_with(&mut |a| put(tape, a, trainable))
    }

    /// Bind each parameter array, in [`Mlp::named`] order, through `put`.
    pub fn bind_with(&self, put: &mut dyn FnMut(&DenseArray) -> Var) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| BoundLinear {
                    weight: put(&l.weight),
                    bias: put(&l.bias),
                })
                .collect(),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &DenseArray)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), &l.weight),
                    (format!("{prefix}.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut DenseArray)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), &mut l.weight),
                    (format!("{prefix}.{i}.bias"), &mut l.bias),
                ]
            })
            .collect()
    }

    /// Values-only forward of a `[B×in]` batch.
    pub fn apply(&self, x: &DenseArray) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = bound.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.gelu(h)?;
            }
            let z = tape.matmul(h, l.weight)?;
            h = tape.add_row_bias(z, l.bias)?;
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

pub(crate) fn put(tape: &mut Tape, a: &DenseArray, trainable: bool) -> Var {
    if trainable {
        tape.leaf(a.clone())
    } else {
        tape.constant(a.clone())
    }
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Result<DenseArray> {
    let n = shape.iter().product();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Contract(e.to_string()))?;
    DenseArray::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reshape a vector to a single-row matrix.
pub(crate) fn as_row(x: &DenseArray) -> Result<DenseArray> {
    x.reshape(&[1, x.len()])
}
