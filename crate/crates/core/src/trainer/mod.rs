//! Two-stage training with structural freezing, Adam, seeded batches and
//! checkpointing.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Adam, LrSchedule, ADAM_EPS, BETA1, BETA2};

use std::path::{Path, PathBuf};

use crate::bench::Benchmark;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Batch, Model, Trainable};
use crate::numkit::DenseArray;
use crate::objective::{self, Stage};

/// Model, optimizer and progress within a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub stage: Stage,
    /// Optimizer steps completed in `stage`.
    pub step: usize,
    pub adam: Adam,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::init(&cfg.model, cfg.mode, cfg.seed)?;
        let slots = model.named().len();
        Ok(Self {
            model,
            stage: Stage::One,
            step: 0,
            adam: Adam::new(slots),
        })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let named = self.model.named();
        let mut arrays: Vec<(String, DenseArray)> = named.iter().map(|(n, _, a)| (n.clone(), (*a).clone())).collect();
        arrays.push(("adam.t".into(), DenseArray::scalar(self.adam.t as f64).expect("finite step count")));
        for (kind, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for ((n, _, _), mo) in named.iter().zip(moments) {
                if let Some(a) = mo {
                    arrays.push((format!("adam.{kind}.{n}"), a.clone()));
                }
            }
        }
        Checkpoint {
            config_hash: cfg.hash(),
            config_text: cfg.to_text(),
            stage: self.stage,
            step: self.step,
            arrays,
        }
    }

    /// Rebuild the state; refuses checkpoints written under another config.
    pub fn from_checkpoint(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "checkpoint config hash {} does not match the current config {}",
                ckpt.config_hash,
                cfg.hash()
            )));
        }
        let mut state = Self::init(cfg)?;
        let names: Vec<String> = state.model.named().into_iter().map(|(n, _, _)| n).collect();
        let missing = |n: &str| Error::Data(format!("checkpoint lacks array '{n}'"));
        let values = names
            .iter()
            .map(|n| ckpt.get(n).cloned().ok_or_else(|| missing(n)))
            .collect::<Result<Vec<_>>>()?;
        state.model.set_params(&values)?;
        state.adam.t = ckpt.get("adam.t").ok_or_else(|| missing("adam.t"))?.item()? as u64;
        for (i, n) in names.iter().enumerate() {
            state.adam.m[i] = ckpt.get(&format!("adam.m.{n}")).cloned();
            state.adam.v[i] = ckpt.get(&format!("adam.v.{n}")).cloned();
        }
        state.stage = ckpt.stage;
        state.step = ckpt.step;
        Ok(state)
    }
}

/// Load a checkpoint together with the config embedded in it.
pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = TrainConfig::resolve(Some(&ckpt.config_text), &[])?;
    let state = TrainState::from_checkpoint(&cfg, &ckpt)?;
    Ok((cfg, state))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub stage: Stage,
    pub step: usize,
    pub task_loss: f64,
    pub aux_loss: f64,
    pub total: f64,
    pub entropy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
}

pub const METRICS_HEADER: [&str; 7] = ["stage", "step", "task_loss", "aux_loss", "total", "entropy", "lr"];

impl RunMetrics {
    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn extend(&mut self, other: RunMetrics) {
        self.records.extend(other.records);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| crate::bench::csv_err(path, e))?;
        w.write_record(METRICS_HEADER).map_err(|e| crate::bench::csv_err(path, e))?;
        for r in &self.records {
            w.write_record([
                r.stage.to_string(),
                r.step.to_string(),
                r.task_loss.to_string(),
                r.aux_loss.to_string(),
                r.total.to_string(),
                r.entropy.to_string(),
                r.lr.to_string(),
            ])
            .map_err(|e| crate::bench::csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where to write the diagnostic dump when a step goes non-finite.
    pub dump_dir: Option<PathBuf>,
    /// Keep the router at its initial (uniform) output; baseline runs only.
    pub freeze_router: bool,
    /// Stop once the stage reaches this many completed steps.
    pub stop_at: Option<usize>,
}

pub fn train_stage1(cfg: &TrainConfig, bench: &Benchmark, state: TrainState, opts: &TrainOptions) -> Result<(TrainState, RunMetrics)> {
    if state.stage != Stage::One {
        return Err(Error::Contract("stage 1 needs a fresh or stage-1 state".into()));
    }
    run_stage(cfg, bench, state, Stage::One, opts)
}

/// Continue from a finished stage-1 state (or resume a stage-2 state).
pub fn train_stage2(cfg: &TrainConfig, bench: &Benchmark, mut state: TrainState, opts: &TrainOptions) -> Result<(TrainState, RunMetrics)> {
    if state.stage == Stage::One {
        if state.step < cfg.stage1.steps {
            return Err(Error::Contract(format!(
                "stage 2 needs a finished stage-1 state ({} of {} steps done)",
                state.step, cfg.stage1.steps
            )));
        }
        state.stage = Stage::Two;
        state.step = 0;
        state.adam = Adam::new(state.adam.slots());
    }
    run_stage(cfg, bench, state, Stage::Two, opts)
}

/// Stage 1 then stage 2 from initialization; also returns the stage-1 state.
pub fn train_both(cfg: &TrainConfig, bench: &Benchmark, opts: &TrainOptions) -> Result<(TrainState, TrainState, RunMetrics)> {
    let (s1, mut metrics) = train_stage1(cfg, bench, TrainState::init(cfg)?, opts)?;
    let (s2, m2) = train_stage2(cfg, bench, s1.clone(), opts)?;
    metrics.extend(m2);
    Ok((s1, s2, metrics))
}

fn run_stage(cfg: &TrainConfig, bench: &Benchmark, mut state: TrainState, stage: Stage, opts: &TrainOptions) -> Result<(TrainState, RunMetrics)> {
    let sc = *cfg.stage(stage);
    let schedule = LrSchedule::new(sc.lr, sc.steps, cfg.warmup);
    let lambda = cfg.schedule().lambda(stage);
    let mut trainable = stage.trainable();
    if opts.freeze_router {
        trainable.router = false;
    }
    let mut metrics = RunMetrics::default();
    let end = opts.stop_at.map_or(sc.steps, |s| s.min(sc.steps));
    while state.step < end {
        let step = state.step;
        let lr = schedule.lr(step);
        let batch = bench.training_batch(cfg.seed, stage, step, sc.batch)?;
        let result = objective::evaluate(&state.model, &batch, lambda, cfg.epsilon, trainable, cfg.microbatch).and_then(|eval| {
            let mut params: Vec<&mut DenseArray> = state.model.named_mut().into_iter().map(|(_, _, p)| p).collect();
            state.adam.step(&mut params, &eval.grads, lr)?;
            Ok(eval)
        });
        let eval = match result {
            Ok(e) => e,
            Err(e @ Error::NonFinite { .. }) => return Err(abort(cfg, &state, stage, step, &batch, trainable, &e, opts)),
            Err(e) => return Err(e),
        };
        let l = eval.loss;
        metrics.records.push(MetricRecord {
            stage,
            step,
            task_loss: l.task,
            aux_loss: l.aux,
            total: l.total,
            entropy: l.entropy,
            lr,
        });
        state.step += 1;
    }
    Ok((state, metrics))
}

#[allow(clippy::too_many_arguments)]
fn abort(
    cfg: &TrainConfig,
    state: &TrainState,
    stage: Stage,
    step: usize,
    batch: &Batch,
    trainable: Trainable,
    cause: &Error,
    opts: &TrainOptions,
) -> Error {
    let dump = opts.dump_dir.as_ref().and_then(|dir| {
        let path = dir.join(format!("abort_stage{stage}_step{step}"));
        write_dump(cfg, state, batch, trainable, &path).ok().map(|_| path)
    });
    Error::TrainingAborted {
        stage: stage.number(),
        step,
        detail: cause.to_string(),
        dump,
    }
}

fn write_dump(cfg: &TrainConfig, state: &TrainState, batch: &Batch, trainable: Trainable, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    state.to_checkpoint(cfg).save(&dir.join("weights.ckpt"))?;
    let routing = state.model.route_batch(batch).ok().map(|w| w.data().to_vec());
    let json = serde_json::json!({
        "batch_size": batch.len(),
        "targets": batch.targets,
        "f_text": batch.f_text.data(),
        "f_image": batch.f_image.data(),
        "routing_weights": routing,
        "trainable": {"router": trainable.router, "connector": trainable.connector, "head": trainable.head},
    });
    let path = dir.join("batch.json");
    std::fs::write(&path, json.to_string()).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        let mut c = TrainConfig::desk();
        c.stage1.steps = 6;
        c.stage2.steps = 4;
        c.stage1.batch = 8;
        c.stage2.batch = 8;
        c
    }

    #[test]
    fn zero_steps_returns_init() {
        let mut cfg = small();
        cfg.stage1.steps = 0;
        let bench = Benchmark::new(&cfg).unwrap();
        let init = TrainState::init(&cfg).unwrap();
        let (s, m) = train_stage1(&cfg, &bench, init.clone(), &TrainOptions::default()).unwrap();
        assert_eq!(s, init);
        assert!(m.records.is_empty());
    }

    #[test]
    fn stage_one_leaves_head_untouched() {
        let cfg = small();
        let bench = Benchmark::new(&cfg).unwrap();
        let init = TrainState::init(&cfg).unwrap();
        let (s, _) = train_stage1(&cfg, &bench, init.clone(), &TrainOptions::default()).unwrap();
        assert_eq!(s.model.head, init.model.head);
        assert_ne!(s.model.connector, init.model.connector);
        assert_ne!(s.model.router, init.model.router);
    }

    #[test]
    fn stage_two_with_zero_lambda_has_zero_aux() {
        let cfg = small();
        let bench = Benchmark::new(&cfg).unwrap();
        let (_, s2, m) = train_both(&cfg, &bench, &TrainOptions::default()).unwrap();
        assert!(m.stage(Stage::Two).all(|r| r.aux_loss == 0.0));
        assert!(m.stage(Stage::One).all(|r| r.aux_loss < 0.0));
        assert_eq!(s2.stage, Stage::Two);
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let cfg = small();
        let bench = Benchmark::new(&cfg).unwrap();
        let (full, m_full) = train_stage1(&cfg, &bench, TrainState::init(&cfg).unwrap(), &TrainOptions::default()).unwrap();

        let mut state = TrainState::init(&cfg).unwrap();
        let mut metrics = RunMetrics::default();
        for stop in [3, 6] {
            let opts = TrainOptions {
                stop_at: Some(stop),
                ..Default::default()
            };
            let (s, m) = train_stage1(&cfg, &bench, state, &opts).unwrap();
            metrics.extend(m);
            let bytes = s.to_checkpoint(&cfg).to_bytes();
            let ck = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
            assert_eq!(ck.to_bytes(), bytes);
            state = TrainState::from_checkpoint(&cfg, &ck).unwrap();
            assert_eq!(state, s);
        }
        assert_eq!(state, full);
        assert_eq!(metrics, m_full);

        let mut other = cfg.clone();
        other.seed += 1;
        let err = TrainState::from_checkpoint(&other, &full.to_checkpoint(&cfg)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn nan_aborts_with_dump() {
        let mut cfg = small();
        cfg.stage1.lr = 1e300;
        let bench = Benchmark::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            dump_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let err = train_stage1(&cfg, &bench, TrainState::init(&cfg).unwrap(), &opts).unwrap_err();
        match err {
            Error::TrainingAborted { stage, dump: Some(d), .. } => {
                assert_eq!(stage, 1);
                assert!(d.join("batch.json").exists());
                assert!(d.join("weights.ckpt").exists());
            }
            other => panic!("unexpected {other}"),
        }
    }
}
