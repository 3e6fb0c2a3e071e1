//! End-to-end pipeline: router → fusion → connector → decoder head.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::StackDims;
use crate::error::{Error, Result};
use crate::fusion::ConnectorParams;
use crate::nn::{self, BoundMlp, Mlp};
use crate::numkit::{softmax_rows, DenseArray, Tape, Var};
use crate::router::{init_router, BoundRouter, InitScheme, RouterDims, RouterMode, RouterParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub stack: StackDims,
    pub text_dim: usize,
    pub proj_dim: usize,
    pub router_hidden: Vec<usize>,
    pub dec_dim: usize,
    pub head_hidden: usize,
    /// Multiplier on the decoder head's output-layer init.
    pub head_scale: f64,
    pub n_classes: usize,
}

impl ModelDims {
    pub fn router_dims(&self) -> RouterDims {
        RouterDims {
            text_dim: self.text_dim,
            image_dim: self.stack.width,
            proj_dim: self.proj_dim,
            layers: self.stack.layers,
            hidden: self.router_hidden.clone(),
        }
    }
}

/// Small decoder standing in for the language model: reads the mean-pooled
/// fused tokens next to the query embedding and maps them to answer logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHead {
    pub mlp: Mlp,
}

impl DecoderHead {
    pub fn init(input_dim: usize, hidden: usize, n_classes: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut mlp = Mlp::init(&[input_dim, hidden, n_classes], &mut nn::rng(seed), false)?;
        let out = mlp.layers.last_mut().expect("two layers");
        out.weight = out.weight.scale(scale)?;
        Ok(Self { mlp })
    }

    pub fn named(&self) -> Vec<(String, &DenseArray)> {
        self.mlp.named("head.mlp")
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        self.mlp.named_mut("head.mlp")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Router,
    Connector,
    Head,
}

/// Which parameter groups are leaves on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub router: bool,
    pub connector: bool,
    pub head: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        router: true,
        connector: true,
        head: true,
    };
    pub const NONE: Trainable = Trainable {
        router: false,
        connector: false,
        head: false,
    };

    pub fn contains(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Router => self.router,
            ParamGroup::Connector => self.connector,
            ParamGroup::Head => self.head,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub router: RouterParams,
    pub connector: ConnectorParams,
    pub head: DecoderHead,
}

/// One optimization batch. `stacks[b]` holds sample `b`'s patch features
/// `[L×P×D_v]`; several samples may share one stack.
#[derive(Debug, Clone)]
pub struct Batch {
    pub stacks: Vec<Arc<DenseArray>>,
    pub f_text: DenseArray,
    pub f_image: DenseArray,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

pub struct BoundModel {
    pub router: BoundRouter,
    pub connector: BoundMlp,
    pub head: BoundMlp,
}

impl Model {
    pub fn init(dims: &ModelDims, mode: RouterMode, seed: u64) -> Result<Self> {
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let (rs, cs, hs): (u64, u64, u64) = (seeds.random(), seeds.random(), seeds.random());
        Ok(Self {
            router: init_router(&dims.router_dims(), mode, InitScheme::FanInZeroFinal, rs)?,
            connector: ConnectorParams::init(dims.stack.width, dims.dec_dim, cs)?,
            head: DecoderHead::init(dims.dec_dim + dims.text_dim, dims.head_hidden, dims.n_classes, dims.head_scale, hs)?,
        })
    }

    pub fn layers(&self) -> usize {
        self.router.dims.layers
    }

    pub fn n_classes(&self) -> usize {
        self.head.mlp.output_dim()
    }

    /// All parameters in a fixed order with their group.
    pub fn named(&self) -> Vec<(String, ParamGroup, &DenseArray)> {
        let mut out: Vec<_> = self
            .router
            .named()
            .into_iter()
            .map(|(n, a)| (n, ParamGroup::Router, a))
            .collect();
        out.extend(self.connector.named().into_iter().map(|(n, a)| (n, ParamGroup::Connector, a)));
        out.extend(self.head.named().into_iter().map(|(n, a)| (n, ParamGroup::Head, a)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ParamGroup, &mut DenseArray)> {
        let mut out: Vec<_> = self
            .router
            .named_mut()
            .into_iter()
            .map(|(n, a)| (n, ParamGroup::Router, a))
            .collect();
        out.extend(self.connector.named_mut().into_iter().map(|(n, a)| (n, ParamGroup::Connector, a)));
        out.extend(self.head.named_mut().into_iter().map(|(n, a)| (n, ParamGroup::Head, a)));
        out
    }

    /// Replace every parameter, in [`Model::named`] order.
    pub fn set_params(&mut self, values: &[DenseArray]) -> Result<()> {
        let mut slots = self.named_mut();
        if slots.len() != values.len() {
            return Err(Error::dim("set_params", &[slots.len()], &[values.len()]));
        }
        for ((name, _, slot), v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::Data(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    slot.shape(),
                    v.shape()
                )));
            }
            **slot = v.clone();
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> BoundModel {
        BoundModel {
            router: self.router.bind(tape, trainable.router),
            connector: self.connector.bind(tape, trainable.connector),
            head: self.head.mlp.bind(tape, trainable.head),
        }
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let d = &self.router.dims;
        if batch.stacks.len() != b || batch.f_text.shape() != [b, d.text_dim] {
            return Err(Error::dim("batch", batch.f_text.shape(), &[b, d.text_dim]));
        }
        if self.router.mode == RouterMode::Multimodal && batch.f_image.shape() != [b, d.image_dim] {
            return Err(Error::dim("batch.f_image", batch.f_image.shape(), &[b, d.image_dim]));
        }
        let width = self.connector.input_dim();
        for s in &batch.stacks {
            let sh = s.shape();
            if sh.len() != 3 || sh[0] != d.layers || sh[2] != width {
                return Err(Error::dim("batch.stack", sh, &[d.layers, 0, width]));
            }
        }
        Ok(())
    }

    /// Router logits for the batch on `tape`.
    pub fn router_logits(&self, tape: &mut Tape, bound: &BoundRouter, batch: &Batch) -> Result<Var> {
        let t = tape.constant(batch.f_text.clone());
        let i = match self.router.mode {
            RouterMode::TextOnly => None,
            RouterMode::Multimodal => Some(tape.constant(batch.f_image.clone())),
        };
        self.router.logits_on_tape(tape, bound, t, i)
    }

    /// Answer logits `[b×K]` for routing weights `w: [b×L]` over `stacks`,
    /// with `f_text: [b×D_t]` the queries.
    pub fn answer_logits(
        &self,
        tape: &mut Tape,
        connector: &BoundMlp,
        head: &BoundMlp,
        w: Var,
        stacks: &[Arc<DenseArray>],
        f_text: Var,
    ) -> Result<Var> {
        let b = stacks.len();
        let sh = stacks[0].shape();
        let (p, dv) = (sh[1], sh[2]);
        let mixed = tape.layer_mix(w, stacks.to_vec().into())?;
        let patches = tape.reshape(mixed, &[b * p, dv])?;
        let tokens = connector.forward(tape, patches)?;
        let pooled = tape.pool_rows(tokens, p)?;
        let input = tape.concat_cols(pooled, f_text)?;
        head.forward(tape, input)
    }

    /// Values-only forward: routing weights `[B×L]` and answer logits `[B×K]`.
    pub fn predict(&self, batch: &Batch) -> Result<(DenseArray, DenseArray)> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::NONE);
        let z = self.router_logits(&mut tape, &bound.router, batch)?;
        let w = tape.softmax_rows(z)?;
        let t = tape.constant(batch.f_text.clone());
        let y = self.answer_logits(&mut tape, &bound.connector, &bound.head, w, &batch.stacks, t)?;
        Ok((tape.value(w).clone(), tape.value(y).clone()))
    }

    /// Routing weights only.
    pub fn route_batch(&self, batch: &Batch) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let bound = self.router.bind(&mut tape, false);
        let z = self.router_logits(&mut tape, &bound, batch)?;
        softmax_rows(tape.value(z))
    }
}
