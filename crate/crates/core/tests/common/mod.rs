#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgif_core::bench::Benchmark;
use tgif_core::config::TrainConfig;
use tgif_core::encoder::StackDims;
use tgif_core::model::{Batch, Model, ModelDims, Trainable};
use tgif_core::numkit::{fd_check, fd_compare, DenseArray, Tape, Var, DEFAULT_STEP};
use tgif_core::objective::{evaluate, Stage, DEFAULT_EPSILON};
use tgif_core::router::RouterMode;
use tgif_core::trainer::{train_stage1, TrainOptions, TrainState};

pub fn small_dims() -> ModelDims {
    ModelDims {
        stack: StackDims {
            layers: 4,
            patches: 3,
            width: 3,
        },
        text_dim: 5,
        proj_dim: 2,
        router_hidden: vec![6],
        dec_dim: 4,
        head_hidden: 5,
        head_scale: 1.0,
        n_classes: 3,
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_batch(d: &ModelDims, b: usize, rng: &mut ChaCha8Rng) -> Batch {
    let sd = d.stack;
    let stacks = (0..b)
        .map(|_| Arc::new(DenseArray::new(vec![sd.layers, sd.patches, sd.width], uniform(rng, sd.layers * sd.patches * sd.width)).unwrap()))
        .collect();
    Batch {
        stacks,
        f_text: DenseArray::matrix(b, d.text_dim, uniform(rng, b * d.text_dim)).unwrap(),
        f_image: DenseArray::matrix(b, sd.width, uniform(rng, b * sd.width)).unwrap(),
        targets: (0..b).map(|_| rng.random_range(0..d.n_classes)).collect(),
    }
}

/// Model whose every parameter, including the zero-initialized router
/// output layer, is jittered so no gradient vanishes structurally.
pub fn jittered_model(d: &ModelDims, mode: RouterMode, rng: &mut ChaCha8Rng) -> Model {
    let mut m = Model::init(d, mode, rng.random()).unwrap();
    for (_, _, p) in m.named_mut() {
        for i in 0..p.len() {
            let v = p.data()[i] + rng.random_range(-0.5..0.5);
            p.set_flat(i, v).unwrap();
        }
    }
    m
}

/// Max relative error of the analytic total-loss gradient over every
/// parameter, for a random model and batch drawn from `seed`.
pub fn pipeline_fd(seed: u64, mode: RouterMode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = small_dims();
    let m = jittered_model(&d, mode, &mut rng);
    let batch = random_batch(&d, 5, &mut rng);
    let lambda = rng.random_range(0.001..0.2);
    let eval = evaluate(&m, &batch, lambda, DEFAULT_EPSILON, Trainable::ALL, 2).unwrap();
    let params: Vec<DenseArray> = m.named().into_iter().map(|(_, _, p)| p.clone()).collect();
    let analytic: Vec<DenseArray> = eval.grads.into_iter().map(Option::unwrap).collect();
    fd_compare(
        |ps| {
            let mut mm = m.clone();
            mm.set_params(ps)?;
            Ok(evaluate(&mm, &batch, lambda, DEFAULT_EPSILON, Trainable::NONE, 0)?.loss.total)
        },
        &params,
        &analytic,
        DEFAULT_STEP,
    )
    .unwrap()
    .max_rel_error
}

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseArray {
    DenseArray::matrix(r, c, uniform(rng, r * c)).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, n: usize) -> DenseArray {
    DenseArray::vector((0..n).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap()
}

/// Reduce any tape value to a scalar with fixed random weights so every
/// output coordinate contributes to the checked gradient.
fn probe(t: &mut Tape, x: Var, seed: u64) -> tgif_core::Result<Var> {
    let shape = t.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(DenseArray::new(shape, uniform(&mut rng, n)).unwrap());
    let p = t.mul(x, w)?;
    t.sum(p)
}

/// Finite-difference error of each tape kernel on random inputs.
pub fn kernel_fd(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = mat(&mut rng, 3, 4);
    let b = mat(&mut rng, 4, 2);
    let c = mat(&mut rng, 3, 4);
    let bias = DenseArray::vector(uniform(&mut rng, 4)).unwrap();
    let w = DenseArray::matrix(2, 3, uniform(&mut rng, 6)).unwrap();
    let stacks: Arc<[Arc<DenseArray>]> = (0..2)
        .map(|_| Arc::new(DenseArray::new(vec![3, 2, 4], uniform(&mut rng, 24)).unwrap()))
        .collect::<Vec<_>>()
        .into();
    let pos = positive(&mut rng, 5);
    let h = DEFAULT_STEP;
    let check = |name: &'static str, params: &[DenseArray], f: &dyn Fn(&mut Tape, &[Var]) -> tgif_core::Result<Var>| {
        (name, fd_check(|t, v| f(t, v), params, h).unwrap().max_rel_error)
    };
    vec![
        check("matmul", &[a.clone(), b.clone()], &|t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, 1)
        }),
        check("add", &[a.clone(), c.clone()], &|t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y, 2)
        }),
        check("sub", &[a.clone(), c.clone()], &|t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y, 3)
        }),
        check("mul", &[a.clone(), c.clone()], &|t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, 4)
        }),
        check("scale", std::slice::from_ref(&a), &|t, v| {
            let y = t.scale(v[0], -1.7)?;
            probe(t, y, 5)
        }),
        check("add_row_bias", &[a.clone(), bias.clone()], &|t, v| {
            let y = t.add_row_bias(v[0], v[1])?;
            probe(t, y, 6)
        }),
        check("gelu", std::slice::from_ref(&a), &|t, v| {
            let y = t.gelu(v[0])?;
            probe(t, y, 7)
        }),
        check("softmax_rows", std::slice::from_ref(&a), &|t, v| {
            let y = t.softmax_rows(v[0])?;
            probe(t, y, 8)
        }),
        check("concat_cols", &[a.clone(), c.clone()], &|t, v| {
            let y = t.concat_cols(v[0], v[1])?;
            probe(t, y, 9)
        }),
        check("mean_rows", std::slice::from_ref(&a), &|t, v| {
            let y = t.mean_rows(v[0])?;
            probe(t, y, 10)
        }),
        check("pool_rows", &[mat(&mut rng.clone(), 4, 3)], &|t, v| {
            let y = t.pool_rows(v[0], 2)?;
            probe(t, y, 11)
        }),
        check("reshape", std::slice::from_ref(&a), &|t, v| {
            let y = t.reshape(v[0], &[2, 6])?;
            probe(t, y, 12)
        }),
        check("xlogx", &[pos], &|t, v| {
            let y = t.xlogx(v[0], DEFAULT_EPSILON)?;
            probe(t, y, 13)
        }),
        check("cross_entropy", std::slice::from_ref(&a), &|t, v| t.cross_entropy(v[0], &[0, 3, 1])),
        check("layer_mix", &[w], &|t, v| {
            let y = t.layer_mix(v[0], stacks.clone())?;
            probe(t, y, 14)
        }),
    ]
}

/// Stage-1 entropy trajectory of H(w̄)/ln L: (minimum, final).
pub fn stage1_entropy(base: &TrainConfig, seed: u64, lambda: f64) -> (f64, f64) {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.stage1.lambda = lambda;
    let bench = Benchmark::new(&cfg).unwrap();
    let (_, m) = train_stage1(&cfg, &bench, TrainState::init(&cfg).unwrap(), &TrainOptions::default()).unwrap();
    let max = (cfg.model.stack.layers as f64).ln();
    let h: Vec<f64> = m.stage(Stage::One).map(|r| r.entropy / max).collect();
    (h.iter().copied().fold(f64::INFINITY, f64::min), *h.last().unwrap())
}

/// One forward+backward pass at the paper preset's full dimensions. All
/// samples share a single encoder stack so memory stays bounded. Returns
/// the loss and the number of parameter gradients checked.
pub fn paper_shape_step(mode: RouterMode) -> tgif_core::Result<(f64, usize)> {
    use tgif_core::bench::Category;
    let mut cfg = TrainConfig::paper();
    cfg.mode = mode;
    let d = &cfg.model;
    assert_eq!((d.stack.layers, d.stack.patches, d.stack.width, d.text_dim, cfg.stage1.batch), (24, 576, 1024, 4096, 256));
    let b = cfg.stage1.batch;
    let bench = Benchmark::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stack = bench.encoder.generate_stack(&bench.random_scene(&mut rng))?;
    let shared = stack.shared_patches();
    let cls = stack.penultimate_cls()?;
    let mut text = Vec::with_capacity(b * d.text_dim);
    let mut targets = Vec::with_capacity(b);
    for i in 0..b {
        let q = bench.random_query(Category::ALL[i % 3], &mut rng);
        text.extend_from_slice(q.f_text.data());
        targets.push(q.target);
    }
    let batch = Batch {
        stacks: vec![shared; b],
        f_text: DenseArray::matrix(b, d.text_dim, text)?,
        f_image: DenseArray::matrix(b, d.stack.width, cls.data().repeat(b))?,
        targets,
    };
    let model = Model::init(d, mode, cfg.seed)?;
    let eval = evaluate(&model, &batch, cfg.stage1.lambda, cfg.epsilon, Trainable::ALL, cfg.microbatch)?;
    let mut checked = 0;
    for ((name, _, p), g) in model.named().into_iter().zip(&eval.grads) {
        let g = g.as_ref().ok_or_else(|| tgif_core::Error::Contract(format!("no gradient for {name}")))?;
        if g.shape() != p.shape() || !g.data().iter().all(|v| v.is_finite()) {
            return Err(tgif_core::Error::Contract(format!("bad gradient for {name}")));
        }
        checked += 1;
    }
    if eval.weights.shape() != [b, d.stack.layers] || !eval.loss.total.is_finite() {
        return Err(tgif_core::Error::Contract("bad routing output".into()));
    }
    Ok((eval.loss.total, checked))
}
