//! λ trade-off sweep over load-balancing schedules.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use super::{csv_err, evaluate, Benchmark, Category, Dataset, EvalReport};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::objective::Stage;
use crate::trainer::{train_both, RunMetrics, TrainOptions, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    NoLb,
    PretrainOnly,
    FullStage,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::NoLb => "no-lb",
            ScheduleKind::PretrainOnly => "pretrain",
            ScheduleKind::FullStage => "full",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One sweep cell: a schedule kind and its coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub kind: ScheduleKind,
    pub lambda: f64,
}

impl GridCell {
    pub const fn no_lb() -> Self {
        Self {
            kind: ScheduleKind::NoLb,
            lambda: 0.0,
        }
    }

    pub const fn pretrain(lambda: f64) -> Self {
        Self {
            kind: ScheduleKind::PretrainOnly,
            lambda,
        }
    }

    pub const fn full(lambda: f64) -> Self {
        Self {
            kind: ScheduleKind::FullStage,
            lambda,
        }
    }

    /// `(stage1_lambda, stage2_lambda)`.
    pub fn lambdas(&self) -> (f64, f64) {
        match self.kind {
            ScheduleKind::NoLb => (0.0, 0.0),
            ScheduleKind::PretrainOnly => (self.lambda, 0.0),
            ScheduleKind::FullStage => (self.lambda, self.lambda),
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        (cfg.stage1.lambda, cfg.stage2.lambda) = self.lambdas();
        cfg
    }
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ScheduleKind::NoLb => f.write_str("no-lb"),
            k => write!(f, "{k}:{}", self.lambda),
        }
    }
}

impl FromStr for GridCell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "no-lb" {
            return Ok(Self::no_lb());
        }
        let bad = || Error::Config(format!("grid cell '{s}': expected no-lb, pretrain:<λ> or full:<λ>"));
        let (kind, lam) = s.split_once(':').ok_or_else(bad)?;
        let lambda: f64 = lam.trim().parse().map_err(|_| bad())?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(bad());
        }
        match kind.trim() {
            "pretrain" => Ok(Self::pretrain(lambda)),
            "full" => Ok(Self::full(lambda)),
            _ => Err(bad()),
        }
    }
}

/// The six schedules of the load-balancing trade-off figure.
pub const DEFAULT_GRID: [GridCell; 6] = [
    GridCell::no_lb(),
    GridCell::pretrain(0.005),
    GridCell::pretrain(0.01),
    GridCell::pretrain(0.1),
    GridCell::full(0.005),
    GridCell::full(0.01),
];

/// Comma-separated cells, or `default` for [`DEFAULT_GRID`].
pub fn parse_grid(spec: &str) -> Result<Vec<GridCell>> {
    if spec.trim() == "default" {
        return Ok(DEFAULT_GRID.to_vec());
    }
    let cells = spec
        .split(',')
        .filter(|c| !c.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<GridCell>>>()?;
    if cells.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    Ok(cells)
}

/// Published (VQA average, POPE accuracy) for one schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    pub cell: GridCell,
    pub vqa_avg: f64,
    pub pope: f64,
}

/// Published trade-off points; context for reading a sweep, not targets.
pub const REFERENCE_POINTS: [ReferencePoint; 6] = [
    ReferencePoint {
        cell: GridCell::no_lb(),
        vqa_avg: 63.81,
        pope: 87.30,
    },
    ReferencePoint {
        cell: GridCell::pretrain(0.01),
        vqa_avg: 64.11,
        pope: 87.91,
    },
    ReferencePoint {
        cell: GridCell::pretrain(0.005),
        vqa_avg: 63.72,
        pope: 87.34,
    },
    ReferencePoint {
        cell: GridCell::pretrain(0.1),
        vqa_avg: 63.96,
        pope: 87.01,
    },
    ReferencePoint {
        cell: GridCell::full(0.01),
        vqa_avg: 62.56,
        pope: 84.32,
    },
    ReferencePoint {
        cell: GridCell::full(0.005),
        vqa_avg: 63.29,
        pope: 87.76,
    },
];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: GridCell,
    pub task_accuracy_general: f64,
    pub routing_accuracy_existence: f64,
    pub task_accuracy_existence: f64,
    /// H(w̄) over the held-out set after stage 2.
    pub mean_entropy: f64,
    /// Mean of `ln L − H(w̄)` over stage-2 training steps.
    pub entropy_gap: f64,
}

impl SweepRow {
    pub fn from_run(cell: GridCell, report: &EvalReport, metrics: &RunMetrics, layers: usize) -> Self {
        let cat = |c| report.category(c);
        Self {
            cell,
            task_accuracy_general: cat(Category::General).map_or(0.0, |r| r.task_accuracy),
            routing_accuracy_existence: cat(Category::Existence).map_or(0.0, |r| r.routing_accuracy),
            task_accuracy_existence: cat(Category::Existence).map_or(0.0, |r| r.task_accuracy),
            mean_entropy: report.mean_entropy,
            entropy_gap: entropy_gap(metrics, layers),
        }
    }

    /// General-task accuracy plus existence routing accuracy.
    pub fn combined(&self) -> f64 {
        self.task_accuracy_general + self.routing_accuracy_existence
    }
}

/// Mean over stage-2 steps of how far the batch routing entropy sits below
/// its maximum `ln L`; zero when stage 2 logged nothing.
pub fn entropy_gap(metrics: &RunMetrics, layers: usize) -> f64 {
    let max = (layers as f64).ln();
    let (sum, n) = metrics
        .stage(Stage::Two)
        .fold((0.0, 0usize), |(s, n), r| (s + (max - r.entropy), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone)]
pub struct CellRun {
    pub config: TrainConfig,
    pub stage1: TrainState,
    pub stage2: TrainState,
    pub metrics: RunMetrics,
    pub report: EvalReport,
    pub row: SweepRow,
}

#[derive(Debug)]
pub struct CellOutcome {
    pub cell: GridCell,
    pub result: Result<CellRun>,
}

/// Train and evaluate one cell against a held-out set.
pub fn run_cell(base: &TrainConfig, cell: GridCell, data: &Dataset) -> Result<CellRun> {
    let cfg = cell.apply(base);
    cfg.validate()?;
    let bench = Benchmark::new(&cfg)?;
    let (stage1, stage2, metrics) = train_both(&cfg, &bench, &TrainOptions::default())?;
    let report = evaluate(&stage2.model, data, &cfg.groups(), cfg.threshold)?;
    let row = SweepRow::from_run(cell, &report, &metrics, cfg.model.stack.layers);
    Ok(CellRun {
        config: cfg,
        stage1,
        stage2,
        metrics,
        report,
        row,
    })
}

/// Every cell in parallel; a failing cell is recorded and the rest continue.
pub fn sweep_lambda(base: &TrainConfig, grid: &[GridCell], data: &Dataset) -> Vec<CellOutcome> {
    grid.par_iter()
        .map(|&cell| CellOutcome {
            cell,
            result: run_cell(base, cell, data),
        })
        .collect()
}

pub const SWEEP_HEADER: [&str; 10] = [
    "schedule",
    "lambda",
    "status",
    "task_accuracy_general",
    "routing_accuracy_existence",
    "task_accuracy_existence",
    "combined",
    "mean_entropy",
    "entropy_gap",
    "error",
];

pub fn write_table(outcomes: &[CellOutcome], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(SWEEP_HEADER).map_err(|e| csv_err(path, e))?;
    for o in outcomes {
        let head = [o.cell.kind.to_string(), o.cell.lambda.to_string()];
        let rest: Vec<String> = match &o.result {
            Ok(run) => {
                let r = &run.row;
                let nums = [
                    r.task_accuracy_general,
                    r.routing_accuracy_existence,
                    r.task_accuracy_existence,
                    r.combined(),
                    r.mean_entropy,
                    r.entropy_gap,
                ];
                std::iter::once("ok".to_string())
                    .chain(nums.iter().map(f64::to_string))
                    .chain([String::new()])
                    .collect()
            }
            Err(e) => std::iter::once("failed".to_string())
                .chain(std::iter::repeat_n(String::new(), 6))
                .chain([e.to_string()])
                .collect(),
        };
        w.write_record(head.iter().chain(&rest)).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
