//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if
//! any criterion fails. Run with `cargo test --test acceptance`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgif_core::bench::{evaluate as eval_dataset, export_heatmap, sweep_lambda, Benchmark, Category, CellOutcome, GridCell, DEFAULT_GRID};
use tgif_core::config::TrainConfig;
use tgif_core::encoder::{GroupAttribute, LayerStack, Provenance, SceneSpec};
use tgif_core::fusion::fuse;
use tgif_core::numkit::{softmax, DenseArray};
use tgif_core::objective::{batch_mean_weights, load_balance_loss};
use tgif_core::router::RouterMode;
use tgif_core::trainer::{train_both, train_stage1, train_stage2, Checkpoint, TrainOptions, TrainState};

const SEEDS: [u64; 3] = [7, 8, 9];

type Check = fn() -> Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_fidelity() -> Result<String, String> {
    let start = Instant::now();
    let mut worst_pipeline = 0.0_f64;
    for mode in [RouterMode::TextOnly, RouterMode::Multimodal] {
        for seed in 0..20 {
            let e = common::pipeline_fd(seed, mode);
            ensure(e < 1e-4, || format!("{mode} seed {seed}: pipeline error {e:e}"))?;
            worst_pipeline = worst_pipeline.max(e);
        }
    }
    let mut worst_kernel = 0.0_f64;
    for seed in 0..20 {
        for (name, e) in common::kernel_fd(seed) {
            ensure(e < 1e-6, || format!("{name} seed {seed}: kernel error {e:e}"))?;
            worst_kernel = worst_kernel.max(e);
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!("pipeline max rel err {worst_pipeline:.1e}, kernels {worst_kernel:.1e}, {took:.1?}"))
}

fn equation_conformance() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checks = 0;
    for i in 0..1000 {
        let n = rng.random_range(1..30);
        let spread = [1.0, 50.0, 700.0][i % 3];
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-spread..spread)).collect();
        let p = softmax(&DenseArray::vector(z.clone()).unwrap()).map_err(|e| e.to_string())?;
        let shifted = softmax(&DenseArray::vector(z.iter().map(|v| v + 3.5).collect()).unwrap()).unwrap();
        ensure(p.is_on_simplex(1e-9), || format!("softmax off simplex for {z:?}"))?;
        ensure(p.max_abs_diff(&shifted).unwrap() <= 1e-9, || "softmax not shift invariant".into())?;
        checks += 2;
    }
    for _ in 0..200 {
        let (l, p, d) = (rng.random_range(2..8), rng.random_range(1..5), rng.random_range(1..5));
        let data: Vec<f64> = (0..l * p * d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let cls = DenseArray::matrix(l, d, vec![0.0; l * d]).unwrap();
        let stack = LayerStack::from_parts(DenseArray::new(vec![l, p, d], data).unwrap(), cls, Provenance { seed: 0, version: 0 }).unwrap();
        let pick = rng.random_range(1..=l);
        let onehot = DenseArray::vector((1..=l).map(|i| if i == pick { 1.0 } else { 0.0 }).collect()).unwrap();
        let f = fuse(&stack, &onehot).unwrap();
        ensure(f.max_abs_diff(&stack.layer(pick).unwrap()).unwrap() <= 1e-10, || "one-hot fusion".into())?;
        let simplex = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            DenseArray::vector(raw.into_iter().map(|v| v / s).collect()).unwrap()
        };
        let (a, b, t) = (simplex(&mut rng), simplex(&mut rng), rng.random_range(0.0..1.0));
        let mix = a.scale(t).unwrap().add(&b.scale(1.0 - t).unwrap()).unwrap();
        let lhs = fuse(&stack, &mix).unwrap();
        let rhs = fuse(&stack, &a).unwrap().scale(t).unwrap().add(&fuse(&stack, &b).unwrap().scale(1.0 - t).unwrap()).unwrap();
        ensure(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10, || "fusion linearity".into())?;
        let rows = [a.clone(), b.clone(), mix.clone()];
        let mean = batch_mean_weights(&rows).unwrap();
        for j in 0..l {
            let direct = (a.data()[j] + b.data()[j] + mix.data()[j]) / 3.0;
            ensure((mean.data()[j] - direct).abs() <= 1e-15, || "batch mean".into())?;
        }
        checks += 3;
    }
    for l in [2usize, 3, 4, 6, 8, 9, 12, 24] {
        for lambda in [0.005, 0.01, 0.1] {
            for eps in [1e-8, 1e-12] {
                let u = load_balance_loss(&DenseArray::vector(vec![1.0 / l as f64; l]).unwrap(), lambda, eps).unwrap();
                let exact = -lambda * (l as f64).ln();
                // ln(1/L + ε) = −ln L + Lε + O(ε²), inside 10ελ only while L < 10
                if l < 10 {
                    ensure((u - exact).abs() <= 10.0 * eps * lambda, || format!("uniform endpoint L={l}: {u} vs {exact}"))?;
                }
                let first_order = exact + lambda * l as f64 * eps;
                ensure((u - first_order).abs() <= 1e-15 + 1e-12 * exact.abs(), || format!("uniform expansion L={l}: {u} vs {first_order}"))?;
                let mut w = vec![0.0; l];
                w[0] = 1.0;
                let h = load_balance_loss(&DenseArray::vector(w).unwrap(), lambda, eps).unwrap();
                let top = lambda * (1.0 + eps).ln();
                ensure((h - top).abs() <= 1e-15 * lambda, || format!("one-hot endpoint L={l}: {h} vs {top}"))?;
                checks += 2;
            }
        }
    }
    Ok(format!("{checks} identities"))
}

fn probe_stack_bits(bench: &Benchmark) -> Vec<u64> {
    let spec = SceneSpec {
        attributes: bench.groups.iter().map(|&group| GroupAttribute { group, value: 3 }).collect(),
        scene_class: Some(1),
        noise_scale: bench.patch_noise,
        seed: 99,
    };
    let s = bench.encoder.generate_stack(&spec).unwrap();
    s.patch_features().data().iter().chain(s.cls_features().data()).map(|v| v.to_bits()).collect()
}

fn head_bits(s: &TrainState) -> Vec<u64> {
    s.model.head.named().into_iter().flat_map(|(_, a)| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

fn freezing_contracts() -> Result<String, String> {
    let cfg = TrainConfig::desk();
    let bench = Benchmark::new(&cfg).map_err(|e| e.to_string())?;
    let probe = probe_stack_bits(&bench);
    let init = TrainState::init(&cfg).map_err(|e| e.to_string())?;
    let (s1, _) = train_stage1(&cfg, &bench, init.clone(), &TrainOptions::default()).map_err(|e| e.to_string())?;
    ensure(head_bits(&s1) == head_bits(&init), || "decoder head moved in stage 1".into())?;
    ensure(s1.model.router != init.model.router, || "router did not train".into())?;
    ensure(probe_stack_bits(&bench) == probe, || "encoder output changed after stage 1".into())?;
    let (s2, _) = train_stage2(&cfg, &bench, s1, &TrainOptions::default()).map_err(|e| e.to_string())?;
    ensure(probe_stack_bits(&bench) == probe, || "encoder output changed after stage 2".into())?;
    ensure(head_bits(&s2) != head_bits(&init), || "decoder head did not train in stage 2".into())?;
    Ok("head bit-identical after stage 1; probe stack bit-identical across both stages".into())
}

/// Re-derive per-category routing accuracy from the exported heatmap file.
fn heatmap_routing_accuracy(path: &Path, bench: &Benchmark, threshold: f64) -> Vec<(Category, f64)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut tally: Vec<(Category, usize, usize)> = Category::ALL.iter().map(|&c| (c, 0, 0)).collect();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let c: Category = fields[0].parse().unwrap();
        let w: Vec<f64> = fields[2..].iter().map(|s| s.parse().unwrap()).collect();
        let mass: f64 = bench.oracle_layers(c).iter().map(|&l| w[l - 1]).sum();
        let t = tally.iter_mut().find(|t| t.0 == c).unwrap();
        t.1 += 1;
        t.2 += usize::from(mass >= threshold);
    }
    tally.into_iter().map(|(c, n, k)| (c, k as f64 / n as f64)).collect()
}

fn routing_specialization() -> Result<String, String> {
    let mut lines = Vec::new();
    for seed in SEEDS {
        let start = Instant::now();
        let mut cfg = GridCell::pretrain(0.01).apply(&TrainConfig::desk());
        cfg.seed = seed;
        let bench = Benchmark::new(&cfg).map_err(|e| e.to_string())?;
        let data = bench.generate_dataset(cfg.data.eval_per_category, cfg.data.eval_seed).map_err(|e| e.to_string())?;
        let (_, s2, _) = train_both(&cfg, &bench, &TrainOptions::default()).map_err(|e| e.to_string())?;
        let report = eval_dataset(&s2.model, &data, &bench.groups, 0.6).map_err(|e| e.to_string())?;
        let took = start.elapsed();
        ensure(took < Duration::from_secs(180), || format!("seed {seed} took {took:?}"))?;
        let ex = report.category(Category::Existence).unwrap();
        let de = report.category(Category::Detail).unwrap();
        for c in [ex, de] {
            ensure(c.routing_accuracy >= 0.90, || format!("seed {seed} {}: routing accuracy {}", c.category, c.routing_accuracy))?;
        }
        let late = |m: &[f64]| m[1..].iter().sum::<f64>();
        ensure(ex.group_mass[0] > de.group_mass[0], || format!("seed {seed}: early mass {:?} vs {:?}", ex.group_mass, de.group_mass))?;
        ensure(late(&de.group_mass) > late(&ex.group_mass), || format!("seed {seed}: late mass {:?} vs {:?}", de.group_mass, ex.group_mass))?;

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("heatmap.csv");
        export_heatmap(&report, &path).map_err(|e| e.to_string())?;
        for (c, acc) in heatmap_routing_accuracy(&path, &bench, 0.6) {
            let reported = report.category(c).unwrap().routing_accuracy;
            ensure(acc == reported, || format!("seed {seed} {c}: heatmap gives {acc}, report {reported}"))?;
        }
        lines.push(format!(
            "seed {seed}: existence {:.2} detail {:.2} ({:.0?})",
            ex.routing_accuracy, de.routing_accuracy, took
        ));
    }
    Ok(lines.join("; "))
}

fn collapse_and_balance() -> Result<String, String> {
    let base = TrainConfig::desk();
    let mut lines = Vec::new();
    for seed in SEEDS {
        let (_, last0) = common::stage1_entropy(&base, seed, 0.0);
        let (min1, _) = common::stage1_entropy(&base, seed, 0.01);
        ensure(last0 < 0.3, || format!("seed {seed}: λ=0 final H/lnL {last0:.3}"))?;
        ensure(min1 >= 0.8, || format!("seed {seed}: λ=0.01 min H/lnL {min1:.3}"))?;
        lines.push(format!("seed {seed}: λ=0 final {last0:.3}, λ=0.01 min {min1:.3}"));
    }
    Ok(format!("H(w̄)/ln L {}", lines.join("; ")))
}

fn lambda_sweep() -> Result<String, String> {
    let base = TrainConfig::desk();
    let bench = Benchmark::new(&base).map_err(|e| e.to_string())?;
    let data = bench.generate_dataset(base.data.eval_per_category, base.data.eval_seed).map_err(|e| e.to_string())?;
    let rows = |outcomes: Vec<CellOutcome>| -> Result<Vec<_>, String> {
        outcomes
            .into_iter()
            .map(|o| o.result.map(|r| (r.row, r.metrics, r.stage2.to_checkpoint(&r.config).to_bytes())).map_err(|e| format!("{}: {e}", o.cell)))
            .collect()
    };
    let first = rows(sweep_lambda(&base, &DEFAULT_GRID, &data))?;
    let second = rows(sweep_lambda(&base, &DEFAULT_GRID, &data))?;
    ensure(first.len() == 6, || format!("{} rows", first.len()))?;
    ensure(first == second, || "sweep is not deterministic".into())?;
    let row = |cell: GridCell| first.iter().map(|r| &r.0).find(|r| r.cell == cell).unwrap();
    let (pre, none, full) = (row(GridCell::pretrain(0.01)), row(GridCell::no_lb()), row(GridCell::full(0.01)));
    ensure(pre.combined() >= none.combined(), || format!("combined pretrain-0.01 {} < no-LB {}", pre.combined(), none.combined()))?;
    for r in first.iter().map(|r| &r.0) {
        ensure(r.cell == full.cell || full.entropy_gap < r.entropy_gap, || {
            format!("full-0.01 gap {:.3} not below {} gap {:.3}", full.entropy_gap, r.cell, r.entropy_gap)
        })?;
    }
    let gaps: Vec<String> = first.iter().map(|r| format!("{} {:.3}", r.0.cell, r.0.entropy_gap)).collect();
    Ok(format!(
        "combined pretrain:0.01 {:.3} vs no-lb {:.3}; gaps {}",
        pre.combined(),
        none.combined(),
        gaps.join(", ")
    ))
}

fn determinism_and_round_trip() -> Result<String, String> {
    let cfg = TrainConfig::desk();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let bench = Benchmark::new(&cfg).map_err(|e| e.to_string())?;
        let (s1, s2, m) = train_both(&cfg, &bench, &TrainOptions::default()).map_err(|e| e.to_string())?;
        let metrics = dir.path().join(format!("metrics{run}.csv"));
        m.write_csv(&metrics).map_err(|e| e.to_string())?;
        outputs.push((
            s1.to_checkpoint(&cfg).to_bytes(),
            s2.to_checkpoint(&cfg).to_bytes(),
            std::fs::read(&metrics).unwrap(),
        ));
    }
    ensure(outputs[0] == outputs[1], || "repeat run differs".into())?;
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    std::fs::write(&a, &outputs[0].1).unwrap();
    let loaded = Checkpoint::load(&a).map_err(|e| e.to_string())?;
    let state = TrainState::from_checkpoint(&cfg, &loaded).map_err(|e| e.to_string())?;
    state.to_checkpoint(&cfg).save(&b).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap(), || "save→load→save differs".into())?;
    Ok(format!("two runs identical ({} checkpoint bytes); save→load→save identical", outputs[0].1.len()))
}

fn paper_shape() -> Result<String, String> {
    let mut parts = Vec::new();
    for mode in [RouterMode::TextOnly, RouterMode::Multimodal] {
        let (loss, grads) = common::paper_shape_step(mode).map_err(|e| format!("{mode}: {e}"))?;
        parts.push(format!("{mode}: loss {loss:.4}, {grads} gradients"));
    }
    Ok(format!("L=24 P=576 Dv=1024 Dt=4096 B=256; {}", parts.join("; ")))
}

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("gradient fidelity", gradient_fidelity),
        ("equation conformance", equation_conformance),
        ("freezing contracts", freezing_contracts),
        ("routing specialization", routing_specialization),
        ("collapse and load balance", collapse_and_balance),
        ("lambda sweep structure", lambda_sweep),
        ("determinism and round-trip", determinism_and_round_trip),
        ("paper preset shape", paper_shape),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let took = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} {name}: PASS [{took:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL [{took:.1}s] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
