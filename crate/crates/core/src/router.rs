//! Layer router: query embedding (optionally plus a global image feature)
//! → logits over encoder layers → softmax weights.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{self, as_row, BoundMlp, Mlp};
use crate::numkit::{softmax, DenseArray, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RouterMode {
    TextOnly,
    Multimodal,
}

impl fmt::Display for RouterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouterMode::TextOnly => "text",
            RouterMode::Multimodal => "multimodal",
        })
    }
}

impl FromStr for RouterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "text-only" => Ok(RouterMode::TextOnly),
            "multimodal" => Ok(RouterMode::Multimodal),
            other => Err(Error::Config(format!("unknown router mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouterDims {
    pub text_dim: usize,
    pub image_dim: usize,
    pub proj_dim: usize,
    pub layers: usize,
    pub hidden: Vec<usize>,
}

impl RouterDims {
    fn mlp_input(&self, mode: RouterMode) -> usize {
        match mode {
            RouterMode::TextOnly => self.text_dim,
            RouterMode::Multimodal => 2 * self.proj_dim,
        }
    }

    fn widths(&self, mode: RouterMode) -> Vec<usize> {
        let mut w = vec![self.mlp_input(mode)];
        w.extend(&self.hidden);
        w.push(self.layers);
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Fan-in-scaled Gaussian hidden layers, zero final layer.
    FanInZeroFinal,
    /// Fan-in-scaled Gaussian everywhere (tests only need a non-uniform router).
    FanIn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub mode: RouterMode,
    pub dims: RouterDims,
    pub mlp: Mlp,
    /// `W_t: [D_t×D_p]`, multimodal only
    pub text_proj: Option<DenseArray>,
    /// `W_v: [D_v×D_p]`, multimodal only
    pub image_proj: Option<DenseArray>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterOutput {
    pub logits: DenseArray,
    pub weights: DenseArray,
}

pub struct BoundRouter {
    pub mlp: BoundMlp,
    pub text_proj: Option<Var>,
    pub image_proj: Option<Var>,
}

impl BoundRouter {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.mlp.vars();
        v.extend(self.text_proj);
        v.extend(self.image_proj);
        v
    }
}

pub fn init_router(dims: &RouterDims, mode: RouterMode, scheme: InitScheme, seed: u64) -> Result<RouterParams> {
    if dims.layers == 0 || dims.text_dim == 0 || (mode == RouterMode::Multimodal && (dims.proj_dim == 0 || dims.image_dim == 0)) {
        return Err(Error::Config(format!("invalid router dims {dims:?}")));
    }
    let mut rng = nn::rng(seed);
    let mlp = Mlp::init(&dims.widths(mode), &mut rng, scheme == InitScheme::FanInZeroFinal)?;
    let (text_proj, image_proj) = match mode {
        RouterMode::TextOnly => (None, None),
        RouterMode::Multimodal => (
            Some(nn::gaussian(&mut rng, &[dims.text_dim, dims.proj_dim], 1.0 / (dims.text_dim as f64).sqrt())?),
            Some(nn::gaussian(&mut rng, &[dims.image_dim, dims.proj_dim], 1.0 / (dims.image_dim as f64).sqrt())?),
        ),
    };
    RouterParams::new(mode, dims.clone(), mlp, text_proj, image_proj)
}

impl RouterParams {
    pub fn new(
        mode: RouterMode,
        dims: RouterDims,
        mlp: Mlp,
        text_proj: Option<DenseArray>,
        image_proj: Option<DenseArray>,
    ) -> Result<Self> {
        if mlp.output_dim() != dims.layers {
            return Err(Error::dim("router", &[mlp.output_dim()], &[dims.layers]));
        }
        if mlp.input_dim() != dims.mlp_input(mode) {
            return Err(Error::dim("router", &[mlp.input_dim()], &[dims.mlp_input(mode)]));
        }
        match (mode, &text_proj, &image_proj) {
            (RouterMode::TextOnly, None, None) => {}
            (RouterMode::Multimodal, Some(wt), Some(wv)) => {
                if wt.shape() != [dims.text_dim, dims.proj_dim] {
                    return Err(Error::dim("router.text_proj", wt.shape(), &[dims.text_dim, dims.proj_dim]));
                }
                if wv.shape() != [dims.image_dim, dims.proj_dim] {
                    return Err(Error::dim("router.image_proj", wv.shape(), &[dims.image_dim, dims.proj_dim]));
                }
            }
            _ => {
                return Err(Error::Contract(format!(
                    "projection matrices must be present exactly in multimodal mode ({mode})"
                )))
            }
        }
        Ok(Self {
            mode,
            dims,
            mlp,
            text_proj,
            image_proj,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundRouter {
        self.bind_with(&mut |a| nn::put(tape, a, trainable))
    }

    /// Bind each parameter array, in [`RouterParams::named`] order, through `put`.
    pub fn bind_with(&self, put: &mut dyn FnMut(&DenseArray) -> Var) -> BoundRouter {
        let mlp = self.mlp.bind_with(put);
        BoundRouter {
            mlp,
            text_proj: self.text_proj.as_ref().map(&mut *put),
            image_proj: self.image_proj.as_ref().map(put),
        }
    }

    pub fn named(&self) -> Vec<(String, &DenseArray)> {
        let mut v = self.mlp.named("router.mlp");
        if let Some(w) = &self.text_proj {
            v.push(("router.text_proj".into(), w));
        }
        if let Some(w) = &self.image_proj {
            v.push(("router.image_proj".into(), w));
        }
        v
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        let mut v = self.mlp.named_mut("router.mlp");
        if let Some(w) = &mut self.text_proj {
            v.push(("router.text_proj".into(), w));
        }
        if let Some(w) = &mut self.image_proj {
            v.push(("router.image_proj".into(), w));
        }
        v
    }

    /// Logits `[B×L]` for a batch of text features `[B×D_t]` and, in
    /// multimodal mode, image features `[B×D_v]`.
    pub fn logits_on_tape(&self, tape: &mut Tape, bound: &BoundRouter, f_text: Var, f_image: Option<Var>) -> Result<Var> {
        let ts = tape.value(f_text).shape().to_vec();
        if ts.len() != 2 || ts[1] != self.dims.text_dim {
            return Err(Error::dim("route", &ts, &[self.dims.text_dim]));
        }
        let input = match (self.mode, f_image) {
            (RouterMode::TextOnly, None) => f_text,
            (RouterMode::TextOnly, Some(_)) => {
                return Err(Error::Contract("text-only router takes no image feature".into()))
            }
            (RouterMode::Multimodal, None) => {
                return Err(Error::Contract("multimodal router needs an image feature".into()))
            }
            (RouterMode::Multimodal, Some(img)) => {
                let is = tape.value(img).shape().to_vec();
                if is.len() != 2 || is[1] != self.dims.image_dim || is[0] != ts[0] {
                    return Err(Error::dim("route_multimodal", &is, &[ts[0], self.dims.image_dim]));
                }
                let (wt, wv) = bound
                    .text_proj
                    .zip(bound.image_proj)
                    .ok_or_else(|| Error::Contract("multimodal router bound without projections".into()))?;
                let pt = tape.matmul(f_text, wt)?;
                let pv = tape.matmul(img, wv)?;
                tape.concat_cols(pt, pv)?
            }
        };
        bound.mlp.forward(tape, input)
    }

    fn route(&self, f_text: &DenseArray, f_image: Option<&DenseArray>) -> Result<RouterOutput> {
        if f_text.rank() != 1 || f_text.len() != self.dims.text_dim {
            return Err(Error::dim("route", f_text.shape(), &[self.dims.text_dim]));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let t = tape.constant(as_row(f_text)?);
        let i = match f_image {
            Some(img) => {
                if img.rank() != 1 || img.len() != self.dims.image_dim {
                    return Err(Error::dim("route_multimodal", img.shape(), &[self.dims.image_dim]));
                }
                Some(tape.constant(as_row(img)?))
            }
            None => None,
        };
        let z = self.logits_on_tape(&mut tape, &bound, t, i)?;
        let logits = tape.value(z).reshape(&[self.dims.layers])?;
        let weights = softmax(&logits)?;
        Ok(RouterOutput { logits, weights })
    }
}

/// `z = MLP(f_text)`, `w = softmax(z)`.
pub fn route_text(params: &RouterParams, f_text: &DenseArray) -> Result<RouterOutput> {
    if params.mode != RouterMode::TextOnly {
        return Err(Error::Contract("route_text needs a text-only router".into()));
    }
    params.route(f_text, None)
}

/// `f_multi = [f_text·W_t, f_image·W_v]`, then as [`route_text`].
pub fn route_multimodal(params: &RouterParams, f_text: &DenseArray, f_image: &DenseArray) -> Result<RouterOutput> {
    if params.mode != RouterMode::Multimodal {
        return Err(Error::Contract("route_multimodal needs a multimodal router".into()));
    }
    params.route(f_text, Some(f_image))
}

/// Mean over token embeddings `[T×D_t]` → pooled text feature `[D_t]`.
pub fn mean_pool_tokens(tokens: &DenseArray) -> Result<DenseArray> {
    if tokens.rank() != 2 || tokens.shape()[0] == 0 {
        return Err(Error::dim("mean_pool_tokens", tokens.shape(), &[]));
    }
    let (t, d) = (tokens.shape()[0], tokens.shape()[1]);
    let mut out = vec![0.0; d];
    for r in 0..t {
        for (o, v) in out.iter_mut().zip(tokens.row(r)) {
            *o += v;
        }
    }
    DenseArray::vector(out.into_iter().map(|x| x / t as f64).collect())
}
