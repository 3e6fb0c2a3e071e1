//! Synthetic query benchmark, evaluation metrics, heatmap export and the
//! λ sweep.
//!
//! Every scene carries one categorical attribute per layer group plus a
//! global scene class. Queries come in three categories: `general` asks for
//! the scene class (readable from any layer), `existence` asks for the
//! early-group attribute and `detail` for the middle-group attribute. Every
//! layer also carries the scene class along one shared direction, so the
//! query tells the decoder what to answer and routing decides whether the
//! needed attribute reaches it at all.

mod sweep;

pub use sweep::{
    entropy_gap, parse_grid, run_cell, sweep_lambda, write_table, CellOutcome, CellRun, GridCell, ReferencePoint,
    ScheduleKind, SweepRow, DEFAULT_GRID, REFERENCE_POINTS, SWEEP_HEADER,
};

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::TrainConfig;
use crate::encoder::{GroupAttribute, LayerGroup, LayerStack, SceneSpec, SyntheticEncoder};
use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::numkit::{entropy, DenseArray};
use crate::objective::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    General,
    Existence,
    Detail,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::General, Category::Existence, Category::Detail];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::General => "general",
            Category::Existence => "existence",
            Category::Detail => "detail",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown category '{s}' (expected general, existence or detail)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub f_text: DenseArray,
    pub category: Category,
    pub template: usize,
    /// 1-indexed layers that carry the answer.
    pub oracle_layers: Vec<usize>,
    pub target: usize,
    pub scene: SceneSpec,
}

/// Fixed text embeddings: one generic caption prompt, one vector per
/// category and a few phrasing templates per category.
#[derive(Debug, Clone)]
pub struct QueryEmbedder {
    generic: Vec<f64>,
    category: Vec<Vec<f64>>,
    templates: Vec<Vec<Vec<f64>>>,
    noise: f64,
}

impl QueryEmbedder {
    pub fn new(dim: usize, templates: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |scale: f64| -> Vec<f64> { gaussian_vec(&mut rng, dim, scale / (dim as f64).sqrt()) };
        let generic = draw(1.0);
        let category = (0..Category::ALL.len()).map(|_| draw(1.0)).collect();
        let templates = (0..Category::ALL.len())
            .map(|_| (0..templates).map(|_| draw(0.5)).collect())
            .collect();
        Self {
            generic,
            category,
            templates,
            noise,
        }
    }

    pub fn dim(&self) -> usize {
        self.generic.len()
    }

    pub fn templates(&self) -> usize {
        self.templates[0].len()
    }

    pub fn generic(&self) -> &[f64] {
        &self.generic
    }

    /// Category vector plus template vector plus isotropic noise.
    pub fn embed(&self, category: Category, template: usize, rng: &mut impl Rng) -> Vec<f64> {
        let d = self.dim();
        let noise = gaussian_vec(rng, d, self.noise / (d as f64).sqrt());
        self.category[category.index()]
            .iter()
            .zip(&self.templates[category.index()][template])
            .zip(noise)
            .map(|((c, t), n)| c + t + n)
            .collect()
    }
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// Encoder, query embedder and layer groups for one configuration.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub encoder: SyntheticEncoder,
    pub embedder: QueryEmbedder,
    pub groups: Vec<LayerGroup>,
    pub patch_noise: f64,
}

impl Benchmark {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let groups = cfg.groups();
        Ok(Self {
            encoder: SyntheticEncoder::new(&cfg.encoder_config())?,
            embedder: QueryEmbedder::new(
                cfg.model.text_dim,
                cfg.data.templates,
                cfg.data.text_noise,
                cfg.data.encoder_seed ^ 0x7465_7874,
            ),
            groups,
            patch_noise: cfg.data.patch_noise,
        })
    }

    pub fn layers(&self) -> usize {
        self.encoder.dims().layers
    }

    /// Layer group a category reads from; `None` means every layer.
    pub fn oracle_group(&self, category: Category) -> Option<LayerGroup> {
        match category {
            Category::General => None,
            Category::Existence => Some(self.groups[0]),
            Category::Detail => Some(self.groups[self.groups.len() / 2]),
        }
    }

    pub fn oracle_layers(&self, category: Category) -> Vec<usize> {
        match self.oracle_group(category) {
            Some(g) => g.layers().collect(),
            None => (1..=self.layers()).collect(),
        }
    }

    fn answer(&self, category: Category, scene: &SceneSpec) -> usize {
        match self.oracle_group(category) {
            None => scene.scene_class.expect("benchmark scenes carry a class"),
            Some(g) => scene
                .attributes
                .iter()
                .find(|a| a.group == g)
                .expect("every group has an attribute")
                .value,
        }
    }

    pub fn random_scene(&self, rng: &mut impl Rng) -> SceneSpec {
        let k = self.encoder.n_values();
        SceneSpec {
            attributes: self
                .groups
                .iter()
                .map(|&group| GroupAttribute {
                    group,
                    value: rng.random_range(0..k),
                })
                .collect(),
            scene_class: Some(rng.random_range(0..k)),
            noise_scale: self.patch_noise,
            seed: rng.random(),
        }
    }

    pub fn random_query(&self, category: Category, rng: &mut impl Rng) -> QuerySample {
        let scene = self.random_scene(rng);
        let template = rng.random_range(0..self.embedder.templates());
        let f_text = self.embedder.embed(category, template, rng);
        QuerySample {
            f_text: DenseArray::vector(f_text).expect("finite embedding"),
            category,
            template,
            oracle_layers: self.oracle_layers(category),
            target: self.answer(category, &scene),
            scene,
        }
    }

    /// Training batch for `step` of `stage`, a pure function of its arguments.
    ///
    /// Stage 1 pairs every scene with the generic caption prompt and asks
    /// for the scene class; stage 2 draws categories uniformly.
    pub fn training_batch(&self, seed: u64, stage: Stage, step: usize, batch: usize) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((stage.number() as u64) << 40) | step as u64);
        let mut rows = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (f_text, scene, target) = match stage {
                Stage::One => {
                    let scene = self.random_scene(&mut rng);
                    let target = self.answer(Category::General, &scene);
                    (self.embedder.generic().to_vec(), scene, target)
                }
                Stage::Two => {
                    let c = Category::ALL[rng.random_range(0..Category::ALL.len())];
                    let q = self.random_query(c, &mut rng);
                    (q.f_text.into_data(), q.scene, q.target)
                }
            };
            rows.push((f_text, self.encoder.generate_stack(&scene)?, target));
        }
        assemble(rows.iter().map(|(t, s, y)| (t.as_slice(), s, *y)))
    }

    pub fn generate_dataset(&self, n_per_category: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(3 * n_per_category);
        for c in Category::ALL {
            for _ in 0..n_per_category {
                samples.push(self.random_query(c, &mut rng));
            }
        }
        let stacks = samples
            .iter()
            .map(|s| self.encoder.generate_stack(&s.scene))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples, stacks })
    }
}

fn assemble<'a>(rows: impl ExactSizeIterator<Item = (&'a [f64], &'a LayerStack, usize)>) -> Result<Batch> {
    let b = rows.len();
    let mut text = Vec::new();
    let mut image = Vec::new();
    let mut stacks = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    let mut dt = 0;
    let mut dv = 0;
    for (t, s, y) in rows {
        dt = t.len();
        text.extend_from_slice(t);
        let cls = s.penultimate_cls()?;
        dv = cls.len();
        image.extend(cls.into_data());
        stacks.push(s.shared_patches());
        targets.push(y);
    }
    Ok(Batch {
        stacks,
        f_text: DenseArray::matrix(b, dt, text)?,
        f_image: DenseArray::matrix(b, dv, image)?,
        targets,
    })
}

/// Held-out queries with their generated stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<QuerySample>,
    pub stacks: Vec<LayerStack>,
}

pub const QUERIES_FILE: &str = "queries.csv";
pub const STACKS_FILE: &str = "stacks.bin";
pub const DATASET_MANIFEST: &str = "dataset.txt";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, range: std::ops::Range<usize>) -> Result<Batch> {
        assemble(range.map(|i| (self.samples[i].f_text.data(), &self.stacks[i], self.samples[i].target)))
    }

    /// Write `queries.csv`, `stacks.bin` and a short text manifest into `dir`.
    pub fn write(&self, dir: &Path, config_hash: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let qpath = dir.join(QUERIES_FILE);
        let mut w = csv::Writer::from_path(&qpath).map_err(|e| csv_err(&qpath, e))?;
        let dt = self.samples.first().map_or(0, |s| s.f_text.len());
        let mut header = vec![
            "query_id".to_string(),
            "category".into(),
            "template".into(),
            "target".into(),
            "oracle_layers".into(),
            "scene_class".into(),
            "attributes".into(),
            "scene_seed".into(),
            "noise_scale".into(),
        ];
        header.extend((0..dt).map(|i| format!("t{i}")));
        w.write_record(&header).map_err(|e| csv_err(&qpath, e))?;
        for (i, s) in self.samples.iter().enumerate() {
            let mut rec = vec![
                i.to_string(),
                s.category.to_string(),
                s.template.to_string(),
                s.target.to_string(),
                join(s.oracle_layers.iter()),
                s.scene.scene_class.map_or(String::new(), |c| c.to_string()),
                s.scene
                    .attributes
                    .iter()
                    .map(|a| format!("{}-{}:{}", a.group.first, a.group.last, a.value))
                    .collect::<Vec<_>>()
                    .join(" "),
                s.scene.seed.to_string(),
                s.scene.noise_scale.to_string(),
            ];
            rec.extend(s.f_text.data().iter().map(|x| x.to_string()));
            w.write_record(&rec).map_err(|e| csv_err(&qpath, e))?;
        }
        w.flush().map_err(|e| Error::io(&qpath, e))?;

        let spath = dir.join(STACKS_FILE);
        let mut sw = BufWriter::new(File::create(&spath).map_err(|e| Error::io(&spath, e))?);
        for s in &self.stacks {
            s.write_to(&mut sw).map_err(|e| Error::io(&spath, e))?;
        }
        sw.flush().map_err(|e| Error::io(&spath, e))?;

        let mpath = dir.join(DATASET_MANIFEST);
        let text = format!(
            "queries = {}\nstacks = {}\ncount = {}\nconfig_hash = {config_hash}\n",
            QUERIES_FILE,
            STACKS_FILE,
            self.len()
        );
        std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let qpath = dir.join(QUERIES_FILE);
        let mut r = csv::Reader::from_path(&qpath).map_err(|e| csv_err(&qpath, e))?;
        let bad = |detail: String| Error::Format {
            path: qpath.clone(),
            detail,
        };
        let mut samples = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(&qpath, e))?;
            let field = |i: usize| rec.get(i).ok_or_else(|| bad(format!("row {row}: missing column {i}")));
            let parse = |i: usize| -> Result<u64> {
                field(i)?
                    .parse()
                    .map_err(|_| bad(format!("row {row}: bad integer in column {i}")))
            };
            let category: Category = field(1)?.parse().map_err(|e: Error| bad(e.to_string()))?;
            let oracle_layers = field(4)?
                .split(' ')
                .map(|x| x.parse().map_err(|_| bad(format!("row {row}: bad oracle layer '{x}'"))))
                .collect::<Result<Vec<usize>>>()?;
            let scene_class = match field(5)? {
                "" => None,
                s => Some(s.parse().map_err(|_| bad(format!("row {row}: bad scene class")))?),
            };
            let attributes = field(6)?
                .split(' ')
                .map(|a| parse_attribute(a).ok_or_else(|| bad(format!("row {row}: bad attribute '{a}'"))))
                .collect::<Result<Vec<_>>>()?;
            let noise_scale: f64 = field(8)?
                .parse()
                .map_err(|_| bad(format!("row {row}: bad noise scale")))?;
            let f_text = (9..rec.len())
                .map(|i| field(i)?.parse().map_err(|_| bad(format!("row {row}: bad text value"))))
                .collect::<Result<Vec<f64>>>()?;
            samples.push(QuerySample {
                f_text: DenseArray::vector(f_text)?,
                category,
                template: parse(2)? as usize,
                oracle_layers,
                target: parse(3)? as usize,
                scene: SceneSpec {
                    attributes,
                    scene_class,
                    noise_scale,
                    seed: parse(7)?,
                },
            });
        }
        let spath = dir.join(STACKS_FILE);
        let mut sr = BufReader::new(File::open(&spath).map_err(|e| Error::io(&spath, e))?);
        let stacks = (0..samples.len())
            .map(|_| {
                LayerStack::read_from(&mut sr).map_err(|e| Error::Format {
                    path: spath.clone(),
                    detail: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, stacks })
    }
}

fn parse_attribute(s: &str) -> Option<GroupAttribute> {
    let (range, value) = s.split_once(':')?;
    let (first, last) = range.split_once('-')?;
    Some(GroupAttribute {
        group: LayerGroup::new(first.parse().ok()?, last.parse().ok()?),
        value: value.parse().ok()?,
    })
}

fn join<T: ToString>(it: impl Iterator<Item = T>) -> String {
    it.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryReport {
    pub category: Category,
    pub count: usize,
    pub routing_accuracy: f64,
    pub task_accuracy: f64,
    /// Mean routing mass on each layer group.
    pub group_mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub routing_accuracy: f64,
    pub task_accuracy: f64,
    /// Entropy of the mean routing distribution over the whole set, in nats.
    pub mean_entropy: f64,
    pub categories: Vec<CategoryReport>,
    /// One routing vector per query, in dataset order.
    pub weights: Vec<(Category, Vec<f64>)>,
}

impl EvalReport {
    pub fn category(&self, c: Category) -> Option<&CategoryReport> {
        self.categories.iter().find(|r| r.category == c)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "threshold": self.threshold,
            "routing_accuracy": self.routing_accuracy,
            "task_accuracy": self.task_accuracy,
            "mean_entropy": self.mean_entropy,
            "categories": self.categories.iter().map(|c| serde_json::json!({
                "category": c.category.name(),
                "count": c.count,
                "routing_accuracy": c.routing_accuracy,
                "task_accuracy": c.task_accuracy,
                "group_mass": c.group_mass,
            })).collect::<Vec<_>>(),
        })
    }
}

const EVAL_CHUNK: usize = 64;

/// Route and answer every query of `data`.
pub fn evaluate(model: &Model, data: &Dataset, groups: &[LayerGroup], threshold: f64) -> Result<EvalReport> {
    let l = model.layers();
    if let Some(s) = data.stacks.first() {
        if s.dims().layers != l {
            return Err(Error::dim("evaluate", &[s.dims().layers], &[l]));
        }
    }
    let mut weights = Vec::with_capacity(data.len());
    let mut correct = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let batch = data.batch(start..end)?;
        let (w, y) = model.predict(&batch)?;
        for r in 0..end - start {
            weights.push(w.row(r).to_vec());
            correct.push(argmax(y.row(r)) == batch.targets[r]);
        }
    }
    Ok(summarize(data, &weights, &correct, groups, threshold))
}

/// Metrics from per-query routing vectors and answer correctness.
pub fn summarize(
    data: &Dataset,
    weights: &[Vec<f64>],
    correct: &[bool],
    groups: &[LayerGroup],
    threshold: f64,
) -> EvalReport {
    let n = data.len();
    let l = weights.first().map_or(0, Vec::len);
    let routed: Vec<bool> = data
        .samples
        .iter()
        .zip(weights)
        .map(|(s, w)| s.oracle_layers.iter().map(|&k| w[k - 1]).sum::<f64>() >= threshold)
        .collect();
    let frac = |xs: &mut dyn Iterator<Item = bool>| {
        let (hit, total) = xs.fold((0usize, 0usize), |(h, t), x| (h + x as usize, t + 1));
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    };
    let mut mean = vec![0.0; l];
    for w in weights {
        for (m, x) in mean.iter_mut().zip(w) {
            *m += x / n as f64;
        }
    }
    let categories = Category::ALL
        .into_iter()
        .filter_map(|c| {
            let idx: Vec<usize> = (0..n).filter(|&i| data.samples[i].category == c).collect();
            if idx.is_empty() {
                return None;
            }
            let group_mass = groups
                .iter()
                .map(|g| idx.iter().map(|&i| g.layers().map(|k| weights[i][k - 1]).sum::<f64>()).sum::<f64>() / idx.len() as f64)
                .collect();
            Some(CategoryReport {
                category: c,
                count: idx.len(),
                routing_accuracy: frac(&mut idx.iter().map(|&i| routed[i])),
                task_accuracy: frac(&mut idx.iter().map(|&i| correct[i])),
                group_mass,
            })
        })
        .collect();
    EvalReport {
        threshold,
        routing_accuracy: frac(&mut routed.iter().copied()),
        task_accuracy: frac(&mut correct.iter().copied()),
        mean_entropy: if n == 0 { 0.0 } else { entropy(&mean) },
        categories,
        weights: data.samples.iter().map(|s| s.category).zip(weights.iter().cloned()).collect(),
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Per-query routing weights as `category,query_id,layer_1..layer_L`.
pub fn export_heatmap(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let l = report.weights.first().map_or(0, |(_, v)| v.len());
    let mut header = vec!["category".to_string(), "query_id".into()];
    header.extend((1..=l).map(|i| format!("layer_{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, (c, v)) in report.weights.iter().enumerate() {
        let mut rec = vec![c.to_string(), i.to_string()];
        rec.extend(v.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::LinearProbe;
    use crate::router::RouterMode;

    fn bench() -> (TrainConfig, Benchmark) {
        let cfg = TrainConfig::desk();
        let b = Benchmark::new(&cfg).unwrap();
        (cfg, b)
    }

    #[test]
    fn empty_dataset() {
        let (_, b) = bench();
        assert!(b.generate_dataset(0, 1).unwrap().is_empty());
    }

    #[test]
    fn dataset_is_seeded() {
        let (_, b) = bench();
        assert_eq!(b.generate_dataset(3, 5).unwrap(), b.generate_dataset(3, 5).unwrap());
        assert_ne!(b.generate_dataset(3, 5).unwrap(), b.generate_dataset(3, 6).unwrap());
    }

    #[test]
    fn training_batches_are_pure_functions_of_step() {
        let (_, b) = bench();
        let x = b.training_batch(7, Stage::Two, 3, 4).unwrap();
        let y = b.training_batch(7, Stage::Two, 3, 4).unwrap();
        let z = b.training_batch(7, Stage::Two, 4, 4).unwrap();
        assert_eq!(x.f_text, y.f_text);
        assert_eq!(x.stacks, y.stacks);
        assert_ne!(x.f_text, z.f_text);
    }

    #[test]
    fn stage_one_prompts_are_constant() {
        let (_, b) = bench();
        let x = b.training_batch(1, Stage::One, 0, 5).unwrap();
        for r in 1..5 {
            assert_eq!(x.f_text.row(r), x.f_text.row(0));
        }
    }

    #[test]
    fn oracle_layers_match_groups() {
        let (_, b) = bench();
        assert_eq!(b.oracle_layers(Category::Existence), vec![1, 2, 3, 4]);
        assert_eq!(b.oracle_layers(Category::Detail), vec![5, 6, 7, 8]);
        assert_eq!(b.oracle_layers(Category::General).len(), 12);
    }

    /// Least-squares probe on 1000 noise-free queries: oracle layers answer
    /// perfectly, the other groups' layers sit near chance.
    #[test]
    fn noise_free_probe_separates_oracle_layers() {
        let mut cfg = TrainConfig::desk();
        cfg.data.patch_noise = 0.0;
        let b = Benchmark::new(&cfg).unwrap();
        for c in [Category::Existence, Category::Detail] {
            let data = {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let samples: Vec<_> = (0..1000).map(|_| b.random_query(c, &mut rng)).collect();
                let stacks = samples.iter().map(|s| b.encoder.generate_stack(&s.scene).unwrap()).collect();
                Dataset { samples, stacks }
            };
            let probe_acc = |layers: &[usize]| {
                let feats: Vec<Vec<f64>> = data
                    .stacks
                    .iter()
                    .map(|s| layers.iter().flat_map(|&l| s.cls(l).unwrap().into_data()).collect())
                    .collect();
                let labels: Vec<usize> = data.samples.iter().map(|s| s.target).collect();
                let (tr, te) = (700, 1000);
                let probe = LinearProbe::fit(&feats[..tr], &labels[..tr], 4, 1e-6).unwrap();
                probe.accuracy(&feats[tr..te], &labels[tr..te])
            };
            let oracle = b.oracle_layers(c);
            assert_eq!(probe_acc(&oracle[..1]), 1.0, "{c}");
            let other: Vec<usize> = (1..=12).filter(|l| !oracle.contains(l)).take(1).collect();
            let chance = probe_acc(&other);
            assert!(chance < 0.4, "{c}: non-oracle accuracy {chance}");
        }
    }

    #[test]
    fn uniform_router_fails_small_oracles() {
        let (cfg, b) = bench();
        let data = b.generate_dataset(10, 2).unwrap();
        let m = Model::init(&cfg.model, RouterMode::TextOnly, 1).unwrap();
        let r = evaluate(&m, &data, &b.groups, 0.6).unwrap();
        for c in [Category::Existence, Category::Detail] {
            assert_eq!(r.category(c).unwrap().routing_accuracy, 0.0);
        }
        assert_eq!(r.category(Category::General).unwrap().routing_accuracy, 1.0);
        assert!((r.mean_entropy - 12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn hard_wired_router_is_fully_accurate() {
        let (_, b) = bench();
        let data = b.generate_dataset(5, 2).unwrap();
        let weights: Vec<Vec<f64>> = data
            .samples
            .iter()
            .map(|s| {
                let mut w = vec![0.0; 12];
                w[s.oracle_layers[0] - 1] = 1.0;
                w
            })
            .collect();
        let r = summarize(&data, &weights, &vec![true; data.len()], &b.groups, 0.6);
        assert_eq!(r.routing_accuracy, 1.0);
    }

    #[test]
    fn dataset_dump_round_trips() {
        let (cfg, b) = bench();
        let data = b.generate_dataset(2, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.write(dir.path(), &cfg.hash()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back.samples, data.samples);
        for (a, b) in back.stacks.iter().zip(&data.stacks) {
            assert_eq!(a.patch_features(), b.patch_features());
            assert_eq!(a.cls_features(), b.cls_features());
        }
    }

    #[test]
    fn heatmap_rows_are_simplex() {
        let (cfg, b) = bench();
        let data = b.generate_dataset(3, 2).unwrap();
        let m = Model::init(&cfg.model, RouterMode::TextOnly, 4).unwrap();
        let r = evaluate(&m, &data, &b.groups, 0.6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        export_heatmap(&r, &p).unwrap();
        let mut rd = csv::Reader::from_path(&p).unwrap();
        assert_eq!(rd.headers().unwrap().get(2), Some("layer_1"));
        let mut rows = 0;
        for rec in rd.records() {
            let rec = rec.unwrap();
            let s: f64 = (2..rec.len()).map(|i| rec[i].parse::<f64>().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-9);
            rows += 1;
        }
        assert_eq!(rows, 9);
    }
}
