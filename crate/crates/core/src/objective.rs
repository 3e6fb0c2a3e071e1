//! Training objective: answer cross-entropy plus the entropy-based
//! load-balancing term on the batch-mean routing distribution.
//!
//! `L_LB = λ Σ_l w̄_l ln(w̄_l + ε)` is the negative entropy of `w̄`, so
//! minimising it pushes the batch-level layer usage toward uniform while
//! leaving individual queries free to specialise.

use std::fmt;
use crate::error::{Error, Result};
use crate::model::{Batch, Model, Trainable};
use crate::numkit::{ops, DenseArray, Tape};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    /// Caption pretraining: router and connector train, decoder frozen.
    One,
    /// Instruction tuning: router, connector and decoder train.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u64) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {n}"))),
        }
    }

    /// Parameter groups updated in this stage. The vision encoder is never
    /// on the tape at all.
    pub fn trainable(self) -> Trainable {
        match self {
            Stage::One => Trainable {
                router: true,
                connector: true,
                head: false,
            },
            Stage::Two => Trainable::ALL,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Load-balancing strength per stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSchedule {
    pub stage1_lambda: f64,
    pub stage2_lambda: f64,
    pub epsilon: f64,
}

impl StageSchedule {
    pub fn new(stage1_lambda: f64, stage2_lambda: f64, epsilon: f64) -> Result<Self> {
        for (name, v) in [("stage1_lambda", stage1_lambda), ("stage2_lambda", stage2_lambda)] {
            check_lambda(name, v)?;
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            stage1_lambda,
            stage2_lambda,
            epsilon,
        })
    }

    pub fn no_lb() -> Self {
        Self::new(0.0, 0.0, DEFAULT_EPSILON).unwrap()
    }

    pub fn pretrain_only(lambda: f64) -> Result<Self> {
        Self::new(lambda, 0.0, DEFAULT_EPSILON)
    }

    pub fn full_stage(lambda: f64) -> Result<Self> {
        Self::new(lambda, lambda, DEFAULT_EPSILON)
    }

    pub fn lambda(&self, stage: Stage) -> f64 {
        match stage {
            Stage::One => self.stage1_lambda,
            Stage::Two => self.stage2_lambda,
        }
    }
}

fn check_lambda(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub aux: f64,
    pub total: f64,
    /// Entropy of the batch-mean routing distribution, in nats.
    pub entropy: f64,
}

/// Column mean of per-sample routing distributions.
pub fn batch_mean_weights(weights: &[DenseArray]) -> Result<DenseArray> {
    let first = weights
        .first()
        .ok_or_else(|| Error::Contract("batch_mean_weights of an empty batch".into()))?;
    let l = first.len();
    let mut acc = vec![0.0; l];
    for w in weights {
        if w.rank() != 1 || w.len() != l {
            return Err(Error::dim("batch_mean_weights", w.shape(), first.shape()));
        }
        for (a, v) in acc.iter_mut().zip(w.data()) {
            *a += v;
        }
    }
    let n = weights.len() as f64;
    DenseArray::vector(acc.into_iter().map(|a| a / n).collect())
}

/// `λ Σ_l w̄_l ln(w̄_l + ε)`; lies in `[-λ ln L, 0]` up to `ε` effects.
pub fn load_balance_loss(w_bar: &DenseArray, lambda: f64, epsilon: f64) -> Result<f64> {
    check_lambda("lambda", lambda)?;
    if w_bar.rank() != 1 || w_bar.is_empty() {
        return Err(Error::dim("load_balance_loss", w_bar.shape(), &[0]));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let s: f64 = w_bar.data().iter().map(|&v| v * (v + epsilon).ln()).sum();
    Ok(lambda * s)
}

/// Cross-entropy of one answer-logit vector against its target class.
pub fn task_loss(logits: &DenseArray, target: usize) -> Result<f64> {
    if logits.rank() != 1 || logits.is_empty() {
        return Err(Error::dim("task_loss", logits.shape(), &[0]));
    }
    if target >= logits.len() {
        return Err(Error::Contract(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(ops::cross_entropy_row(logits.data(), target))
}

/// Loss values for a batch without gradients.
pub fn total_loss(model: &Model, batch: &Batch, stage: Stage, schedule: &StageSchedule) -> Result<LossBreakdown> {
    Ok(evaluate(model, batch, schedule.lambda(stage), schedule.epsilon, Trainable::NONE, 0)?.loss)
}

/// Loss, routing weights and parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub loss: LossBreakdown,
    /// Per-sample routing weights `[B×L]`.
    pub weights: DenseArray,
    /// Aligned with [`Model::named`]; `None` for frozen groups.
    pub grads: Vec<Option<DenseArray>>,
}

/// Forward and backward pass of the full objective.
///
/// The router runs once over the whole batch. The fusion, connector and
/// decoder run in chunks of `microbatch` samples (0 = whole batch) on their
/// own tapes; each chunk's gradient with respect to the routing weights is
/// fed back into the router tape, so peak memory is set by the chunk size.
pub fn evaluate(
    model: &Model,
    batch: &Batch,
    lambda: f64,
    epsilon: f64,
    trainable: Trainable,
    microbatch: usize,
) -> Result<ObjectiveEval> {
    check_lambda("lambda", lambda)?;
    model.check_batch(batch)?;
    let b = batch.len();
    let l = model.layers();
    let chunk = if microbatch == 0 { b } else { microbatch.min(b) };

    let mut rtape = Tape::new();
    let rbound = model.router.bind(&mut rtape, trainable.router);
    let z = model.router_logits(&mut rtape, &rbound, batch)?;
    let w = rtape.softmax_rows(z)?;
    let w_bar = rtape.mean_rows(w)?;
    let aux = if lambda > 0.0 {
        let xl = rtape.xlogx(w_bar, epsilon)?;
        let s = rtape.sum(xl)?;
        Some(rtape.scale(s, lambda)?)
    } else {
        None
    };
    let weights = rtape.value(w).clone();
    let entropy = ops::entropy(rtape.value(w_bar).data());
    let aux_value = aux.map(|a| rtape.value(a).item()).transpose()?.unwrap_or(0.0);

    let mut connector_grads: Option<Vec<DenseArray>> = None;
    let mut head_grads: Option<Vec<DenseArray>> = None;
    let mut dw = vec![0.0; b * l];
    let mut task = 0.0_f64;
    for start in (0..b).step_by(chunk) {
        let end = (start + chunk).min(b);
        let mut tape = Tape::new();
        let wc = DenseArray::matrix(end - start, l, weights.data()[start * l..end * l].to_vec())?;
        let wv = if trainable.router { tape.leaf(wc) } else { tape.constant(wc) };
        let cb = model.connector.bind(&mut tape, trainable.connector);
        let hb = model.head.mlp.bind(&mut tape, trainable.head);
        let td = model.router.dims.text_dim;
        let t = tape.constant(DenseArray::matrix(end - start, td, batch.f_text.data()[start * td..end * td].to_vec())?);
        let y = model.answer_logits(&mut tape, &cb, &hb, wv, &batch.stacks[start..end], t)?;
        let ce = tape.cross_entropy(y, &batch.targets[start..end])?;
        let loss = tape.scale(ce, 1.0 / b as f64)?;
        task += tape.value(loss).item()?;
        if !(trainable.router || trainable.connector || trainable.head) {
            continue;
        }
        let g = tape.backward(loss)?;
        if trainable.router {
            dw[start * l..end * l].copy_from_slice(g.get(wv).expect("leaf gradient").data());
        }
        if trainable.connector {
            accumulate(&mut connector_grads, cb.vars().iter().map(|v| g.get(*v).expect("leaf gradient")));
        }
        if trainable.head {
            accumulate(&mut head_grads, hb.vars().iter().map(|v| g.get(*v).expect("leaf gradient")));
        }
    }

    let router_grads = if trainable.router {
        let mut seeds = vec![(w, DenseArray::matrix(b, l, dw)?)];
        if let Some(a) = aux {
            seeds.push((a, DenseArray::scalar(1.0)?));
        }
        let g = rtape.backward_seeded(&seeds)?;
        Some(
            rbound
                .vars()
                .iter()
                .map(|v| g.get(*v).expect("leaf gradient").clone())
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let mut grads = Vec::new();
    let counts = [
        model.router.named().len(),
        model.connector.named().len(),
        model.head.named().len(),
    ];
    for (group, n) in [router_grads, connector_grads, head_grads].into_iter().zip(counts) {
        match group {
            Some(g) => grads.extend(g.into_iter().map(Some)),
            None => grads.extend(std::iter::repeat_n(None, n)),
        }
    }

    if !task.is_finite() || !aux_value.is_finite() {
        return Err(Error::NonFinite { op: "objective" });
    }
    Ok(ObjectiveEval {
        loss: LossBreakdown {
            task,
            aux: aux_value,
            total: task + aux_value,
            entropy,
        },
        weights,
        grads,
    })
}

fn accumulate<'a>(acc: &mut Option<Vec<DenseArray>>, grads: impl Iterator<Item = &'a DenseArray>) {
    match acc {
        None => *acc = Some(grads.cloned().collect()),
        Some(a) => {
            for (dst, g) in a.iter_mut().zip(grads) {
                dst.add_assign_unchecked(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::StackDims;
    use crate::model::ModelDims;
    use crate::numkit::{fd_compare, softmax};
    use crate::router::RouterMode;
    use proptest::prelude::*;
    use std::sync::Arc;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
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

    fn random_batch(d: &ModelDims, b: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let sd = &d.stack;
        let stacks = (0..b)
            .map(|_| {
                Arc::new(DenseArray::new(vec![sd.layers, sd.patches, sd.width], rand(sd.layers * sd.patches * sd.width)).unwrap())
            })
            .collect();
        let f_text = DenseArray::matrix(b, d.text_dim, rand(b * d.text_dim)).unwrap();
        let f_image = DenseArray::matrix(b, sd.width, rand(b * sd.width)).unwrap();
        let targets = (0..b).map(|i| i % d.n_classes).collect();
        Batch {
            stacks,
            f_text,
            f_image,
            targets,
        }
    }

    /// Router with non-zero output layer so gradients are informative.
    fn busy_model(mode: RouterMode, seed: u64) -> Model {
        let mut m = Model::init(&dims(), mode, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
        for (_, _, p) in m.named_mut() {
            for i in 0..p.len() {
                let v = p.data()[i] + rng.random_range(-0.5..0.5);
                p.set_flat(i, v).unwrap();
            }
        }
        m
    }

    #[test]
    fn uniform_usage_gives_minimal_aux() {
        let l = 8;
        let u = DenseArray::vector(vec![1.0 / l as f64; l]).unwrap();
        let lam = 0.01;
        let got = load_balance_loss(&u, lam, DEFAULT_EPSILON).unwrap();
        let expect = -lam * (l as f64).ln();
        assert!((got - expect).abs() <= 10.0 * DEFAULT_EPSILON * lam, "{got} vs {expect}");
    }

    #[test]
    fn one_hot_usage_gives_zero_aux() {
        let mut v = vec![0.0; 6];
        v[2] = 1.0;
        let got = load_balance_loss(&DenseArray::vector(v).unwrap(), 0.01, DEFAULT_EPSILON).unwrap();
        assert!(got.abs() <= 10.0 * DEFAULT_EPSILON * 0.01);
    }

    #[test]
    fn two_layer_hand_value() {
        let w = DenseArray::vector(vec![0.7, 0.3]).unwrap();
        let got = load_balance_loss(&w, 1.0, 0.0_f64.max(1e-300)).unwrap();
        let expect = 0.7 * 0.7f64.ln() + 0.3 * 0.3f64.ln();
        assert!((got - expect).abs() < 1e-12);
        assert!((got + 0.6108643020548935).abs() < 1e-12);
    }

    #[test]
    fn negative_lambda_is_config_error() {
        let w = DenseArray::vector(vec![0.5, 0.5]).unwrap();
        assert!(matches!(load_balance_loss(&w, -0.1, 1e-8), Err(Error::Config(_))));
        assert!(StageSchedule::full_stage(-1.0).is_err());
    }

    #[test]
    fn cross_entropy_three_classes() {
        let logits = DenseArray::vector(vec![1.0, 2.0, 0.5]).unwrap();
        let got = task_loss(&logits, 1).unwrap();
        let lse = (1f64.exp() + 2f64.exp() + 0.5f64.exp()).ln();
        assert!((got - (lse - 2.0)).abs() < 1e-12);
        assert!((got - 0.4643687841079447).abs() < 1e-12);
        assert!(task_loss(&logits, 3).is_err());
    }

    #[test]
    fn batch_mean_is_columnwise() {
        let a = DenseArray::vector(vec![1.0, 0.0, 0.0]).unwrap();
        let b = DenseArray::vector(vec![0.0, 0.5, 0.5]).unwrap();
        let m = batch_mean_weights(&[a, b]).unwrap();
        assert_eq!(m.data(), &[0.5, 0.25, 0.25]);
    }

    #[test]
    fn presets() {
        assert_eq!(StageSchedule::no_lb().lambda(Stage::One), 0.0);
        let p = StageSchedule::pretrain_only(0.01).unwrap();
        assert_eq!((p.lambda(Stage::One), p.lambda(Stage::Two)), (0.01, 0.0));
        let f = StageSchedule::full_stage(0.01).unwrap();
        assert_eq!((f.lambda(Stage::One), f.lambda(Stage::Two)), (0.01, 0.01));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn single_sample_breakdown_matches_scalar_oracle() {
        let m = busy_model(RouterMode::TextOnly, 3);
        let batch = random_batch(&dims(), 1, 4);
        let lam = 0.05;
        let eval = evaluate(&m, &batch, lam, DEFAULT_EPSILON, Trainable::NONE, 0).unwrap();

        // Independent scalar pipeline.
        let logits = m.router.mlp.apply(&batch.f_text).unwrap();
        let w = softmax(&logits.reshape(&[4]).unwrap()).unwrap();
        let stack = &batch.stacks[0];
        let (l, p, dv) = (4, 3, 3);
        let mut fused = vec![0.0; p * dv];
        for li in 0..l {
            for j in 0..p * dv {
                fused[j] += w.data()[li] * stack.data()[li * p * dv + j];
            }
        }
        let tokens = m.connector.mlp.apply(&DenseArray::matrix(p, dv, fused).unwrap()).unwrap();
        let dd = tokens.cols();
        let mut input: Vec<f64> = (0..dd).map(|c| (0..p).map(|r| tokens.data()[r * dd + c]).sum::<f64>() / p as f64).collect();
        input.extend_from_slice(batch.f_text.data());
        let y = m.head.mlp.apply(&DenseArray::matrix(1, input.len(), input).unwrap()).unwrap();
        let task = task_loss(&y.reshape(&[3]).unwrap(), batch.targets[0]).unwrap();
        let aux = lam * w.data().iter().map(|&v| v * (v + DEFAULT_EPSILON).ln()).sum::<f64>();

        assert!((eval.loss.task - task).abs() < 1e-12);
        assert!((eval.loss.aux - aux).abs() < 1e-12);
        assert_eq!(eval.loss.total, eval.loss.task + eval.loss.aux);
    }

    #[test]
    fn frozen_groups_have_no_gradient() {
        let m = busy_model(RouterMode::TextOnly, 1);
        let batch = random_batch(&dims(), 4, 2);
        let eval = evaluate(&m, &batch, 0.01, DEFAULT_EPSILON, Stage::One.trainable(), 0).unwrap();
        for ((name, group, _), g) in m.named().iter().zip(&eval.grads) {
            assert_eq!(g.is_some(), Stage::One.trainable().contains(*group), "{name}");
        }
    }

    #[test]
    fn microbatching_matches_whole_batch() {
        let m = busy_model(RouterMode::Multimodal, 5);
        let batch = random_batch(&dims(), 7, 6);
        let whole = evaluate(&m, &batch, 0.02, DEFAULT_EPSILON, Trainable::ALL, 0).unwrap();
        let split = evaluate(&m, &batch, 0.02, DEFAULT_EPSILON, Trainable::ALL, 3).unwrap();
        assert!((whole.loss.total - split.loss.total).abs() < 1e-12);
        for (a, b) in whole.grads.iter().zip(&split.grads) {
            assert!(a.as_ref().unwrap().max_abs_diff(b.as_ref().unwrap()).unwrap() < 1e-12);
        }
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        for mode in [RouterMode::TextOnly, RouterMode::Multimodal] {
            let m = busy_model(mode, 11);
            let batch = random_batch(&dims(), 5, 12);
            let lam = 0.3;
            let eval = evaluate(&m, &batch, lam, DEFAULT_EPSILON, Trainable::ALL, 2).unwrap();
            let params: Vec<DenseArray> = m.named().into_iter().map(|(_, _, p)| p.clone()).collect();
            let analytic: Vec<DenseArray> = eval.grads.into_iter().map(Option::unwrap).collect();
            let report = fd_compare(
                |ps| {
                    let mut mm = m.clone();
                    mm.set_params(ps)?;
                    Ok(evaluate(&mm, &batch, lam, DEFAULT_EPSILON, Trainable::NONE, 0)?.loss.total)
                },
                &params,
                &analytic,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{mode}: {report:?}");
        }
    }

    proptest! {
        #[test]
        fn aux_bounds(raw in prop::collection::vec(0.0f64..1.0, 2..16), lam in 0.0f64..1.0) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            let w = DenseArray::vector(raw.iter().map(|v| (v + 1e-9 / raw.len() as f64) / s).collect()).unwrap();
            let lb = load_balance_loss(&w, lam, DEFAULT_EPSILON).unwrap();
            let l = raw.len() as f64;
            prop_assert!(lb <= 10.0 * DEFAULT_EPSILON * lam + 1e-15);
            prop_assert!(lb >= -lam * l.ln() - 1e-12);
        }

        #[test]
        fn aux_step_raises_entropy(z in prop::collection::vec(-3.0f64..3.0, 2..10)) {
            let w0 = softmax(&DenseArray::vector(z.clone()).unwrap()).unwrap();
            let h0 = ops::entropy(w0.data());
            prop_assume!(h0 < (z.len() as f64).ln() - 1e-6);
            let mut tape = Tape::new();
            let zv = tape.leaf(DenseArray::matrix(1, z.len(), z.clone()).unwrap());
            let w = tape.softmax_rows(zv).unwrap();
            let wb = tape.mean_rows(w).unwrap();
            let xl = tape.xlogx(wb, DEFAULT_EPSILON).unwrap();
            let s = tape.sum(xl).unwrap();
            let g = tape.backward(s).unwrap();
            let gz = g.get(zv).unwrap();
            let step: Vec<f64> = z.iter().zip(gz.data()).map(|(a, b)| a - 1e-3 * b).collect();
            let h1 = ops::entropy(softmax(&DenseArray::vector(step).unwrap()).unwrap().data());
            prop_assert!(h1 > h0, "{h1} <= {h0}");
        }
    }
}
