use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use tgif_core::bench::{self, Benchmark, Category, Dataset, REFERENCE_POINTS};
use tgif_core::config::{parse_override, TrainConfig};
use tgif_core::model::Batch;
use tgif_core::numkit::DenseArray;
use tgif_core::objective::Stage;
use tgif_core::trainer::{self, Checkpoint, RunMetrics, TrainOptions, TrainState};
use tgif_core::{Error, Result};

/// Default output root when `--out` is not given.
const OUT_ENV: &str = "TGIF_OUT";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "tgif", version, about = "Query-conditioned layer routing on a synthetic encoder benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a held-out benchmark dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset seed; defaults to `data.eval_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Queries per category; defaults to `data.eval_per_category`.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train stage 1, stage 2, or both.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Continue from a checkpoint; its embedded config is used unless overridden.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset and export the routing heatmap.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-query layer weights.
    Route {
        #[arg(long)]
        ckpt: PathBuf,
        /// One comma-separated query embedding per line.
        #[arg(long, conflicts_with = "category")]
        query_embedding: Option<PathBuf>,
        #[arg(long, requires = "n")]
        category: Option<Category>,
        #[arg(long)]
        n: Option<usize>,
        /// Seed for sampled queries and image features.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the vectors as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of a λ grid.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated cells (`no-lb`, `pretrain:<λ>`, `full:<λ>`) or `default`.
        #[arg(long, default_value = "default")]
        grid: String,
        /// Held-out dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set stage1.lr=5e-4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn is_empty(&self) -> bool {
        self.config.is_none() && self.overrides.is_empty()
    }

    fn resolve(&self) -> Result<TrainConfig> {
        let overrides = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        match &self.config {
            Some(p) => TrainConfig::load(p, &overrides),
            None => TrainConfig::resolve(None, &overrides),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

struct Run {
    command: &'static str,
    started: String,
    out: PathBuf,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str, out: Option<PathBuf>) -> Result<Self> {
        let out = out.unwrap_or_else(|| {
            std::env::var_os(OUT_ENV)
                .map_or_else(|| PathBuf::from("runs"), PathBuf::from)
                .join(command)
        });
        std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        Ok(Self {
            command,
            started: now(),
            out,
            outputs: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn finish(self, cfg: Option<&TrainConfig>, extra: Value) -> Result<()> {
        let path = self.out.join(MANIFEST_FILE);
        let manifest = json!({
            "command": self.command,
            "args": std::env::args().collect::<Vec<_>>(),
            "config": cfg.map(|c| c.to_text()),
            "config_hash": cfg.map(TrainConfig::hash),
            "seed": cfg.map(|c| c.seed),
            "started": self.started,
            "finished": now(),
            "outputs": self.outputs,
            "version": env!("CARGO_PKG_VERSION"),
            "details": extra,
        });
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error kind={} exit={} message={}", e.kind(), code, json!(e.to_string()));
            eprintln!("{}", detail(&e));
            ExitCode::from(code as u8)
        }
    }
}

fn detail(e: &Error) -> String {
    match e {
        Error::Config(_) => "check the config file and --set overrides; keys are listed in the README".into(),
        Error::TrainingAborted { dump: Some(d), .. } => {
            format!("diagnostic dump (weights and offending batch) written to {}", d.display())
        }
        Error::TrainingAborted { .. } | Error::NonFinite { .. } => "a non-finite value appeared; lower the learning rate".into(),
        Error::Io { path, .. } | Error::Format { path, .. } => format!("while reading or writing {}", path.display()),
        _ => "inputs do not match the model or dataset dimensions".into(),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { cfg, seed, n, out } => gen_data(&cfg.resolve()?, seed, n, out),
        Command::Train { cfg, stage, resume, out } => train(&cfg, stage, resume, out),
        Command::Eval { ckpt, data, out } => eval(&ckpt, &data, out),
        Command::Route {
            ckpt,
            query_embedding,
            category,
            n,
            seed,
            out,
        } => route(&ckpt, query_embedding, category.zip(n), seed, out),
        Command::Sweep { cfg, grid, data, out } => sweep(&cfg.resolve()?, &grid, data, out),
    }
}

fn gen_data(cfg: &TrainConfig, seed: Option<u64>, n: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let mut run = Run::start("gen-data", out)?;
    let seed = seed.unwrap_or(cfg.data.eval_seed);
    let n = n.unwrap_or(cfg.data.eval_per_category);
    let data = Benchmark::new(cfg)?.generate_dataset(n, seed)?;
    data.write(&run.out, &cfg.hash())?;
    for f in [bench::QUERIES_FILE, bench::STACKS_FILE, bench::DATASET_MANIFEST] {
        run.path(f);
    }
    println!("wrote {} queries to {}", data.len(), run.out.display());
    run.finish(Some(cfg), json!({"dataset_seed": seed, "n_per_category": n}))
}

fn train(args: &ConfigArgs, stage: StageArg, resume: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let (cfg, state) = match &resume {
        Some(path) if args.is_empty() => trainer::load_checkpoint(path)?,
        Some(path) => {
            let cfg = args.resolve()?;
            let state = TrainState::from_checkpoint(&cfg, &Checkpoint::load(path)?)?;
            (cfg, state)
        }
        None => {
            let cfg = args.resolve()?;
            let state = TrainState::init(&cfg)?;
            (cfg, state)
        }
    };
    if stage == StageArg::One && state.stage == Stage::Two {
        return Err(Error::Config("--stage 1 cannot resume a stage-2 checkpoint".into()));
    }
    if stage == StageArg::Two && resume.is_none() {
        return Err(Error::Config("--stage 2 needs --resume with a stage-1 checkpoint".into()));
    }
    let mut run = Run::start("train", out)?;
    let bench = Benchmark::new(&cfg)?;
    let opts = TrainOptions {
        dump_dir: Some(run.out.clone()),
        ..Default::default()
    };
    let mut metrics = RunMetrics::default();
    let mut state = state;
    if stage != StageArg::Two && state.stage == Stage::One {
        let (s, m) = trainer::train_stage1(&cfg, &bench, state, &opts)?;
        s.to_checkpoint(&cfg).save(&run.path("stage1.ckpt"))?;
        metrics.extend(m);
        state = s;
    }
    if stage != StageArg::One {
        let (s, m) = trainer::train_stage2(&cfg, &bench, state, &opts)?;
        s.to_checkpoint(&cfg).save(&run.path("stage2.ckpt"))?;
        metrics.extend(m);
        state = s;
    }
    metrics.write_csv(&run.path("metrics.csv"))?;
    match metrics.records.last() {
        Some(r) => println!(
            "stage {} step {}: task {:.4} entropy {:.4}",
            state.stage, state.step, r.task_loss, r.entropy
        ),
        None => println!("stage {} step {}: no steps run", state.stage, state.step),
    }
    run.finish(
        Some(&cfg),
        json!({"resume": resume, "stage": state.stage.number(), "step": state.step}),
    )
}

fn eval(ckpt: &Path, data_dir: &Path, out: Option<PathBuf>) -> Result<()> {
    let (cfg, state) = trainer::load_checkpoint(ckpt)?;
    let data = Dataset::read(data_dir)?;
    let mut run = Run::start("eval", out)?;
    let report = bench::evaluate(&state.model, &data, &cfg.groups(), cfg.threshold)?;
    let rpath = run.path("report.json");
    let text = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    std::fs::write(&rpath, text).map_err(|e| io_err(&rpath, e))?;
    bench::export_heatmap(&report, &run.path("heatmap.csv"))?;
    for c in &report.categories {
        println!(
            "{:<9} routing {:.3} task {:.3} group mass {:?}",
            c.category.name(),
            c.routing_accuracy,
            c.task_accuracy,
            c.group_mass.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    println!("mean entropy {:.4}", report.mean_entropy);
    run.finish(Some(&cfg), json!({"checkpoint": ckpt, "data": data_dir}))
}

fn route(
    ckpt: &Path,
    file: Option<PathBuf>,
    sampled: Option<(Category, usize)>,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let (cfg, state) = trainer::load_checkpoint(ckpt)?;
    let bench = Benchmark::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (labels, texts): (Vec<String>, Vec<Vec<f64>>) = match (file, sampled) {
        (Some(path), _) => read_embeddings(&path)?
            .into_iter()
            .map(|t| ("query".to_string(), t))
            .unzip(),
        (None, Some((c, n))) => (0..n)
            .map(|_| (c.to_string(), bench.random_query(c, &mut rng).f_text.into_data()))
            .unzip(),
        (None, None) => {
            return Err(Error::Config(
                "route needs --query-embedding FILE or --category C --n N".into(),
            ))
        }
    };
    let b = texts.len();
    if b == 0 {
        return Err(Error::Data("no queries to route".into()));
    }
    let dt = cfg.model.text_dim;
    if let Some(t) = texts.iter().find(|t| t.len() != dt) {
        return Err(Error::Dimension {
            op: "route",
            lhs: vec![t.len()],
            rhs: vec![dt],
        });
    }
    let mut images = Vec::with_capacity(b * cfg.model.stack.width);
    let mut stacks = Vec::with_capacity(b);
    for _ in 0..b {
        let stack = bench.encoder.generate_stack(&bench.random_scene(&mut rng))?;
        images.extend(stack.penultimate_cls()?.into_data());
        stacks.push(stack.shared_patches());
    }
    let batch = Batch {
        stacks,
        f_text: DenseArray::matrix(b, dt, texts.concat())?,
        f_image: DenseArray::matrix(b, cfg.model.stack.width, images)?,
        targets: vec![0; b],
    };
    let w = state.model.route_batch(&batch)?;
    let l = w.cols();
    let mut lines = vec![format!(
        "query_id,category,{}",
        (1..=l).map(|i| format!("layer_{i}")).collect::<Vec<_>>().join(",")
    )];
    for (i, label) in labels.iter().enumerate() {
        let row: Vec<String> = w.row(i).iter().map(|x| format!("{x:.6}")).collect();
        lines.push(format!("{i},{label},{}", row.join(",")));
    }
    let text = lines.join("\n") + "\n";
    print!("{text}");
    if let Some(dir) = out {
        let mut run = Run::start("route", Some(dir))?;
        let p = run.path("routes.csv");
        std::fs::write(&p, &text).map_err(|e| io_err(&p, e))?;
        run.finish(Some(&cfg), json!({"checkpoint": ckpt, "query_seed": seed}))?;
    }
    Ok(())
}

fn read_embeddings(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, l)| {
            l.split(',')
                .map(|x| {
                    x.trim().parse::<f64>().map_err(|_| Error::Format {
                        path: path.to_path_buf(),
                        detail: format!("line {}: bad number '{}'", n + 1, x.trim()),
                    })
                })
                .collect()
        })
        .collect()
}

fn sweep(cfg: &TrainConfig, grid: &str, data_dir: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cells = bench::parse_grid(grid)?;
    let data = match &data_dir {
        Some(d) => Dataset::read(d)?,
        None => Benchmark::new(cfg)?.generate_dataset(cfg.data.eval_per_category, cfg.data.eval_seed)?,
    };
    let mut run = Run::start("sweep", out)?;
    let outcomes = bench::sweep_lambda(cfg, &cells, &data);
    for o in &outcomes {
        let dir = format!("cell_{}", o.cell.to_string().replace(':', "_"));
        match &o.result {
            Ok(r) => {
                std::fs::create_dir_all(run.out.join(&dir)).map_err(|e| io_err(&run.out.join(&dir), e))?;
                r.stage2.to_checkpoint(&r.config).save(&run.path(&format!("{dir}/stage2.ckpt")))?;
                r.metrics.write_csv(&run.path(&format!("{dir}/metrics.csv")))?;
                bench::export_heatmap(&r.report, &run.path(&format!("{dir}/heatmap.csv")))?;
                let row = &r.row;
                println!(
                    "{:<16} general task {:.3} existence routing {:.3} combined {:.3} entropy {:.3} gap {:.3}",
                    o.cell.to_string(),
                    row.task_accuracy_general,
                    row.routing_accuracy_existence,
                    row.combined(),
                    row.mean_entropy,
                    row.entropy_gap
                );
            }
            Err(e) => println!("{:<16} failed: {e}", o.cell.to_string()),
        }
    }
    bench::write_table(&outcomes, &run.path("sweep.csv"))?;
    let failed = outcomes.iter().filter(|o| o.result.is_err()).count();
    let reference: Vec<Value> = REFERENCE_POINTS
        .iter()
        .map(|p| json!({"cell": p.cell.to_string(), "vqa_avg": p.vqa_avg, "pope": p.pope}))
        .collect();
    run.finish(
        Some(cfg),
        json!({"grid": cells.iter().map(ToString::to_string).collect::<Vec<_>>(), "failed_cells": failed, "reference_points": reference, "data": data_dir}),
    )
}
