//! Run configuration: flat `key = value` text with dotted section keys.
//!
//! Resolution order is built-in preset, then config file, then command-line
//! overrides. The resolved configuration renders back to canonical text
//! whose SHA-256 identifies the run in checkpoints and manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, LayerGroup, StackDims};
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::objective::{Stage, StageSchedule};
use crate::router::RouterMode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub lambda: f64,
}

/// Synthetic benchmark parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Values per attribute and scene classes; also the answer vocabulary.
    pub n_values: usize,
    /// Number of contiguous layer groups (early, mid, late, …).
    pub groups: usize,
    pub attribute_gain: f64,
    pub scene_gain_shallow: f64,
    pub scene_gain_deep: f64,
    pub scene_shared: bool,
    pub patch_noise: f64,
    pub text_noise: f64,
    pub templates: usize,
    pub encoder_seed: u64,
    pub eval_per_category: usize,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_values: 4,
            groups: 3,
            attribute_gain: 0.25,
            scene_gain_shallow: 1.0,
            scene_gain_deep: 1.06,
            scene_shared: true,
            patch_noise: 0.1,
            text_noise: 0.3,
            templates: 4,
            encoder_seed: 1,
            eval_per_category: 200,
            eval_seed: 1001,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: String,
    pub seed: u64,
    pub mode: RouterMode,
    pub model: ModelDims,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub epsilon: f64,
    pub warmup: f64,
    /// Samples per task-tape chunk; 0 runs the whole batch at once.
    pub microbatch: usize,
    pub threshold: f64,
    pub data: DataConfig,
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown preset '{name}' (expected desk or paper)"))),
        }
    }

    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            seed: 7,
            mode: RouterMode::TextOnly,
            model: ModelDims {
                stack: StackDims {
                    layers: 12,
                    patches: 16,
                    width: 32,
                },
                text_dim: 32,
                proj_dim: 64,
                router_hidden: vec![64],
                dec_dim: 32,
                head_hidden: 32,
                head_scale: 1.0,
                n_classes: 4,
            },
            stage1: StageConfig {
                steps: 500,
                lr: 1e-3,
                batch: 64,
                lambda: 0.01,
            },
            stage2: StageConfig {
                steps: 500,
                lr: 3e-3,
                batch: 32,
                lambda: 0.0,
            },
            epsilon: 1e-8,
            warmup: 0.03,
            microbatch: 0,
            threshold: 0.6,
            data: DataConfig::default(),
        }
    }

    /// Full-size dimensions and learning rates; meant for shape checks.
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            seed: 7,
            mode: RouterMode::TextOnly,
            model: ModelDims {
                stack: StackDims {
                    layers: 24,
                    patches: 576,
                    width: 1024,
                },
                text_dim: 4096,
                proj_dim: 1024,
                router_hidden: vec![1024],
                dec_dim: 32,
                head_hidden: 32,
                head_scale: 1.0,
                n_classes: 4,
            },
            stage1: StageConfig {
                steps: 2180,
                lr: 1e-3,
                batch: 256,
                lambda: 0.01,
            },
            stage2: StageConfig {
                steps: 5196,
                lr: 2e-5,
                batch: 128,
                lambda: 0.0,
            },
            epsilon: 1e-8,
            warmup: 0.03,
            microbatch: 8,
            threshold: 0.6,
            data: DataConfig::default(),
        }
    }

    /// Preset named by `preset` in `text` (default desk), then `text`, then `overrides`.
    pub fn resolve(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let file = match text {
            Some(t) => parse_kv(t)?,
            None => Vec::new(),
        };
        let preset = overrides
            .iter()
            .chain(&file)
            .find(|(k, _)| k == "preset")
            .map_or("desk", |(_, v)| v.as_str());
        let mut cfg = Self::preset(preset)?;
        for (k, v) in file.iter().chain(overrides) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(Some(&text), overrides)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let d = &mut self.data;
        match key {
            "preset" => self.preset = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "router.mode" => self.mode = v.parse()?,
            "model.layers" => m.stack.layers = num(key, v)?,
            "model.patches" => m.stack.patches = num(key, v)?,
            "model.image_dim" => m.stack.width = num(key, v)?,
            "model.text_dim" => m.text_dim = num(key, v)?,
            "model.proj_dim" => m.proj_dim = num(key, v)?,
            "model.router_hidden" => {
                m.router_hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "model.dec_dim" => m.dec_dim = num(key, v)?,
            "model.head_hidden" => m.head_hidden = num(key, v)?,
            "model.head_scale" => m.head_scale = num(key, v)?,
            "stage1.steps" => self.stage1.steps = num(key, v)?,
            "stage1.lr" => self.stage1.lr = num(key, v)?,
            "stage1.batch" => self.stage1.batch = num(key, v)?,
            "stage1.lambda" => self.stage1.lambda = num(key, v)?,
            "stage2.steps" => self.stage2.steps = num(key, v)?,
            "stage2.lr" => self.stage2.lr = num(key, v)?,
            "stage2.batch" => self.stage2.batch = num(key, v)?,
            "stage2.lambda" => self.stage2.lambda = num(key, v)?,
            "loss.epsilon" => self.epsilon = num(key, v)?,
            "train.warmup" => self.warmup = num(key, v)?,
            "train.microbatch" => self.microbatch = num(key, v)?,
            "eval.threshold" => self.threshold = num(key, v)?,
            "data.n_values" => {
                d.n_values = num(key, v)?;
                m.n_classes = d.n_values;
            }
            "data.groups" => d.groups = num(key, v)?,
            "data.attribute_gain" => d.attribute_gain = num(key, v)?,
            "data.scene_gain_shallow" => d.scene_gain_shallow = num(key, v)?,
            "data.scene_gain_deep" => d.scene_gain_deep = num(key, v)?,
            "data.scene_shared" => d.scene_shared = num(key, v)?,
            "data.patch_noise" => d.patch_noise = num(key, v)?,
            "data.text_noise" => d.text_noise = num(key, v)?,
            "data.templates" => d.templates = num(key, v)?,
            "data.encoder_seed" => d.encoder_seed = num(key, v)?,
            "data.eval_per_category" => d.eval_per_category = num(key, v)?,
            "data.eval_seed" => d.eval_seed = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical `key = value` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let d = &self.data;
        let hidden: Vec<String> = m.router_hidden.iter().map(|h| h.to_string()).collect();
        vec![
            ("preset", self.preset.clone()),
            ("seed", self.seed.to_string()),
            ("router.mode", self.mode.to_string()),
            ("model.layers", m.stack.layers.to_string()),
            ("model.patches", m.stack.patches.to_string()),
            ("model.image_dim", m.stack.width.to_string()),
            ("model.text_dim", m.text_dim.to_string()),
            ("model.proj_dim", m.proj_dim.to_string()),
            ("model.router_hidden", hidden.join(",")),
            ("model.dec_dim", m.dec_dim.to_string()),
            ("model.head_hidden", m.head_hidden.to_string()),
            ("model.head_scale", m.head_scale.to_string()),
            ("stage1.steps", self.stage1.steps.to_string()),
            ("stage1.lr", self.stage1.lr.to_string()),
            ("stage1.batch", self.stage1.batch.to_string()),
            ("stage1.lambda", self.stage1.lambda.to_string()),
            ("stage2.steps", self.stage2.steps.to_string()),
            ("stage2.lr", self.stage2.lr.to_string()),
            ("stage2.batch", self.stage2.batch.to_string()),
            ("stage2.lambda", self.stage2.lambda.to_string()),
            ("loss.epsilon", self.epsilon.to_string()),
            ("train.warmup", self.warmup.to_string()),
            ("train.microbatch", self.microbatch.to_string()),
            ("eval.threshold", self.threshold.to_string()),
            ("data.n_values", d.n_values.to_string()),
            ("data.groups", d.groups.to_string()),
            ("data.attribute_gain", d.attribute_gain.to_string()),
            ("data.scene_gain_shallow", d.scene_gain_shallow.to_string()),
            ("data.scene_gain_deep", d.scene_gain_deep.to_string()),
            ("data.scene_shared", d.scene_shared.to_string()),
            ("data.patch_noise", d.patch_noise.to_string()),
            ("data.text_noise", d.text_noise.to_string()),
            ("data.templates", d.templates.to_string()),
            ("data.encoder_seed", d.encoder_seed.to_string()),
            ("data.eval_per_category", d.eval_per_category.to_string()),
            ("data.eval_seed", d.eval_seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of [`TrainConfig::to_text`].
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let m = &self.model;
        self.model.stack.validate().map_err(|e| Error::Config(e.to_string()))?;
        for (name, v) in [
            ("model.text_dim", m.text_dim),
            ("model.dec_dim", m.dec_dim),
            ("model.head_hidden", m.head_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.mode == RouterMode::Multimodal && m.proj_dim == 0 {
            return bad("model.proj_dim must be positive for the multimodal router".into());
        }
        if m.router_hidden.contains(&0) {
            return bad("model.router_hidden widths must be positive".into());
        }
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if !(s.lr.is_finite() && s.lr > 0.0) {
                return bad(format!("{name}.lr must be positive, got {}", s.lr));
            }
            if s.batch == 0 {
                return bad(format!("{name}.batch must be at least 1"));
            }
        }
        StageSchedule::new(self.stage1.lambda, self.stage2.lambda, self.epsilon)?;
        if !(0.0..1.0).contains(&self.warmup) {
            return bad(format!("train.warmup must be in [0, 1), got {}", self.warmup));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad(format!("eval.threshold must be in (0, 1], got {}", self.threshold));
        }
        let d = &self.data;
        if d.n_values < 2 || d.templates == 0 {
            return bad("data.n_values must be >= 2 and data.templates >= 1".into());
        }
        if d.groups < 2 || d.groups > m.stack.layers {
            return bad(format!("data.groups must be in 2..={}", m.stack.layers));
        }
        for (name, v) in [
            ("data.attribute_gain", d.attribute_gain),
            ("data.scene_gain_shallow", d.scene_gain_shallow),
            ("data.scene_gain_deep", d.scene_gain_deep),
            ("data.patch_noise", d.patch_noise),
            ("data.text_noise", d.text_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> StageSchedule {
        StageSchedule {
            stage1_lambda: self.stage1.lambda,
            stage2_lambda: self.stage2.lambda,
            epsilon: self.epsilon,
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::One => &self.stage1,
            Stage::Two => &self.stage2,
        }
    }

    pub fn groups(&self) -> Vec<LayerGroup> {
        LayerGroup::even_partition(self.model.stack.layers, self.data.groups)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dims: self.model.stack,
            n_values: self.data.n_values,
            attribute_gain: self.data.attribute_gain,
            scene_gain_shallow: self.data.scene_gain_shallow,
            scene_gain_deep: self.data.scene_gain_deep,
            scene_shared: self.data.scene_shared,
            weight_seed: self.data.encoder_seed,
        }
    }
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if seen.insert(k.to_string(), i + 1).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parse `KEY=VALUE` command-line overrides.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("override '{s}' is not KEY=VALUE")))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
