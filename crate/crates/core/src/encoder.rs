//! Frozen synthetic multi-layer encoder.
//!
//! Each layer embeds the categorical attribute of the layer group it belongs
//! to through its own fixed Gaussian matrix, optionally adds a depth-ramped
//! embedding of a global scene class, and adds isotropic patch noise. The
//! embedding matrices are drawn once from the weight seed and never change.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::numkit::DenseArray;

pub const ENCODER_VERSION: u32 = 1;
pub const STACK_MAGIC: [u8; 4] = *b"TGLS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackDims {
    pub layers: usize,
    pub patches: usize,
    pub width: usize,
}

impl StackDims {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.patches < 1 || self.width < 1 {
            return Err(Error::Spec(format!(
                "stack dims need L >= 2, P >= 1, D_v >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Inclusive 1-indexed range of encoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGroup {
    pub first: usize,
    pub last: usize,
}

impl LayerGroup {
    pub fn new(first: usize, last: usize) -> Self {
        Self { first, last }
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.first..=self.last).contains(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> {
        self.first..=self.last
    }

    pub fn len(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        self.last < self.first
    }

    /// Split `1..=layers` into `n` contiguous groups of near-equal size.
    pub fn even_partition(layers: usize, n: usize) -> Vec<LayerGroup> {
        let mut out = Vec::with_capacity(n);
        let mut start = 1;
        for g in 0..n {
            let end = (g + 1) * layers / n;
            out.push(LayerGroup::new(start, end));
            start = end + 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupAttribute {
    pub group: LayerGroup,
    pub value: usize,
}

/// What one synthetic image contains.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub attributes: Vec<GroupAttribute>,
    /// Global class carried by every layer with depth-dependent strength.
    pub scene_class: Option<usize>,
    pub noise_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub version: u32,
}

/// Per-layer patch features `[L×P×D_v]` and per-layer [CLS] vectors `[L×D_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    patch_features: Arc<DenseArray>,
    cls_features: DenseArray,
    pub provenance: Provenance,
}

impl LayerStack {
    pub fn from_parts(patch_features: DenseArray, cls_features: DenseArray, provenance: Provenance) -> Result<Self> {
        let ps = patch_features.shape();
        let cs = cls_features.shape();
        if ps.len() != 3 || cs.len() != 2 || ps[0] != cs[0] || ps[2] != cs[1] {
            return Err(Error::dim("layer_stack", ps, cs));
        }
        Ok(Self {
            patch_features: Arc::new(patch_features),
            cls_features,
            provenance,
        })
    }

    pub fn dims(&self) -> StackDims {
        let s = self.patch_features.shape();
        StackDims {
            layers: s[0],
            patches: s[1],
            width: s[2],
        }
    }

    pub fn patch_features(&self) -> &DenseArray {
        &self.patch_features
    }

    /// Shared handle to the patch features, for batching without copies.
    pub fn shared_patches(&self) -> Arc<DenseArray> {
        Arc::clone(&self.patch_features)
    }

    pub fn cls_features(&self) -> &DenseArray {
        &self.cls_features
    }

    /// Patch features of 1-indexed layer `l` as `[P×D_v]`.
    pub fn layer(&self, l: usize) -> Result<DenseArray> {
        let d = self.dims();
        if l == 0 || l > d.layers {
            return Err(Error::Contract(format!("layer {l} outside 1..={}", d.layers)));
        }
        DenseArray::matrix(d.patches, d.width, self.patch_features.row(l - 1).to_vec())
    }

    pub fn cls(&self, l: usize) -> Result<DenseArray> {
        let d = self.dims();
        if l == 0 || l > d.layers {
            return Err(Error::Contract(format!("layer {l} outside 1..={}", d.layers)));
        }
        DenseArray::vector(self.cls_features.row(l - 1).to_vec())
    }

    /// [CLS] vector of layer `L−1`, the global image feature for the
    /// multimodal router.
    pub fn penultimate_cls(&self) -> Result<DenseArray> {
        let l = self.dims().layers;
        if l < 2 {
            return Err(Error::Contract("penultimate layer needs L >= 2".into()));
        }
        self.cls(l - 1)
    }

    /// Binary dump: magic, version, L, P, D_v as little-endian u32, then
    /// row-major little-endian f64 patch features followed by [CLS] features.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let d = self.dims();
        w.write_all(&STACK_MAGIC)?;
        for v in [ENCODER_VERSION, d.layers as u32, d.patches as u32, d.width as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for x in self.patch_features.data().iter().chain(self.cls_features.data()) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::io::Result<Self> {
        use std::io::{Error as IoError, ErrorKind};
        let bad = |m: String| IoError::new(ErrorKind::InvalidData, m);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != STACK_MAGIC {
            return Err(bad(format!("bad stack magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        let mut header = [0u32; 4];
        for h in header.iter_mut() {
            r.read_exact(&mut word)?;
            *h = u32::from_le_bytes(word);
        }
        let [version, l, p, dv] = header.map(|v| v as usize);
        if version as u32 != ENCODER_VERSION {
            return Err(bad(format!("unsupported stack version {version}")));
        }
        let mut read_f64s = |n: usize| -> std::io::Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let patch = read_f64s(l * p * dv)?;
        let cls = read_f64s(l * dv)?;
        let patch = DenseArray::new(vec![l, p, dv], patch).map_err(|e| bad(e.to_string()))?;
        let cls = DenseArray::new(vec![l, dv], cls).map_err(|e| bad(e.to_string()))?;
        LayerStack::from_parts(
            patch,
            cls,
            Provenance {
                seed: 0,
                version: version as u32,
            },
        )
        .map_err(|e| bad(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub dims: StackDims,
    /// Cardinality of every categorical attribute (and of the scene class).
    pub n_values: usize,
    pub attribute_gain: f64,
    /// Scene-class gain at layer 1 and at layer L; linear in between.
    pub scene_gain_shallow: f64,
    pub scene_gain_deep: f64,
    /// One scene direction shared by all layers instead of one per layer.
    pub scene_shared: bool,
    pub weight_seed: u64,
}

/// The frozen encoder: fixed per-layer embedding matrices `[K×D_v]`.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    dims: StackDims,
    n_values: usize,
    attribute_embed: Vec<DenseArray>,
    scene_embed: Vec<DenseArray>,
}

impl SyntheticEncoder {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        config.dims.validate()?;
        if config.n_values < 2 {
            return Err(Error::Spec("attributes need at least two values".into()));
        }
        let StackDims { layers, width, .. } = config.dims;
        let k = config.n_values;
        let mut rng = ChaCha8Rng::seed_from_u64(config.weight_seed);
        let std = 1.0 / (width as f64).sqrt();
        let mut draw = |gain: f64| -> Result<DenseArray> {
            let normal = Normal::new(0.0, std * gain).map_err(|e| Error::Spec(e.to_string()))?;
            DenseArray::matrix(k, width, (0..k * width).map(|_| normal.sample(&mut rng)).collect())
        };
        let mut attribute_embed = (0..layers)
            .map(|_| draw(config.attribute_gain))
            .collect::<Result<Vec<_>>>()?;
        let gain = |l: usize| {
            let t = if layers > 1 { l as f64 / (layers - 1) as f64 } else { 1.0 };
            config.scene_gain_shallow + t * (config.scene_gain_deep - config.scene_gain_shallow)
        };
        let scene_embed = if config.scene_shared {
            let base = draw(1.0)?;
            if k < width {
                let basis = orthonormal_rows(&base);
                let rescale = (width as f64 / (width - basis.len()) as f64).sqrt();
                for a in &mut attribute_embed {
                    *a = project_out(a, &basis, rescale)?;
                }
            }
            (0..layers).map(|l| base.scale(gain(l))).collect::<Result<Vec<_>>>()?
        } else {
            (0..layers).map(|l| draw(gain(l))).collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            dims: config.dims,
            n_values: k,
            attribute_embed,
            scene_embed,
        })
    }

    /// Encoder with explicit `[K×D_v]` embedding matrices per layer.
    pub fn from_embeddings(dims: StackDims, attribute_embed: Vec<DenseArray>, scene_embed: Vec<DenseArray>) -> Result<Self> {
        dims.validate()?;
        if attribute_embed.len() != dims.layers || scene_embed.len() != dims.layers {
            return Err(Error::dim("from_embeddings", &[dims.layers], &[attribute_embed.len(), scene_embed.len()]));
        }
        let k = attribute_embed[0].rows();
        for e in attribute_embed.iter().chain(&scene_embed) {
            if e.shape() != [k, dims.width] {
                return Err(Error::dim("from_embeddings", e.shape(), &[k, dims.width]));
            }
        }
        Ok(Self {
            dims,
            n_values: k,
            attribute_embed,
            scene_embed,
        })
    }

    pub fn dims(&self) -> StackDims {
        self.dims
    }

    pub fn n_values(&self) -> usize {
        self.n_values
    }

    /// Layer `l` (1-indexed) → index into `spec.attributes`.
    fn layer_assignment(&self, spec: &SceneSpec) -> Result<Vec<usize>> {
        let l = self.dims.layers;
        let mut owner = vec![None; l];
        for (i, a) in spec.attributes.iter().enumerate() {
            if a.group.first == 0 || a.group.last > l || a.group.is_empty() {
                return Err(Error::Spec(format!(
                    "attribute group {}..={} outside layers 1..={l}",
                    a.group.first, a.group.last
                )));
            }
            if a.value >= self.n_values {
                return Err(Error::Spec(format!(
                    "attribute value {} outside 0..{}",
                    a.value, self.n_values
                )));
            }
            for layer in a.group.layers() {
                if owner[layer - 1].replace(i).is_some() {
                    return Err(Error::Spec(format!("layer {layer} assigned to two attribute groups")));
                }
            }
        }
        owner
            .into_iter()
            .enumerate()
            .map(|(i, o)| o.ok_or_else(|| Error::Spec(format!("layer {} has no attribute group", i + 1))))
            .collect()
    }

    pub fn generate_stack(&self, spec: &SceneSpec) -> Result<LayerStack> {
        let owner = self.layer_assignment(spec)?;
        if let Some(s) = spec.scene_class {
            if s >= self.n_values {
                return Err(Error::Spec(format!("scene class {s} outside 0..{}", self.n_values)));
            }
        }
        if !(spec.noise_scale >= 0.0 && spec.noise_scale.is_finite()) {
            return Err(Error::Spec(format!("noise scale {} must be >= 0", spec.noise_scale)));
        }
        let StackDims { layers, patches, width } = self.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut patch = Vec::with_capacity(layers * patches * width);
        let mut cls = vec![0.0; layers * width];
        for l in 0..layers {
            let value = spec.attributes[owner[l]].value;
            let mut signal = self.attribute_embed[l].row(value).to_vec();
            if let Some(s) = spec.scene_class {
                for (x, e) in signal.iter_mut().zip(self.scene_embed[l].row(s)) {
                    *x += e;
                }
            }
            let cls_row = &mut cls[l * width..(l + 1) * width];
            for _ in 0..patches {
                for (d, &base) in signal.iter().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let x = base + spec.noise_scale * z;
                    patch.push(x);
                    cls_row[d] += x;
                }
            }
            cls_row.iter_mut().for_each(|c| *c /= patches as f64);
        }
        LayerStack::from_parts(
            DenseArray::new(vec![layers, patches, width], patch)?,
            DenseArray::new(vec![layers, width], cls)?,
            Provenance {
                seed: spec.seed,
                version: ENCODER_VERSION,
            },
        )
    }

    /// Probe accuracy of every group attribute read from every layer's
    /// [CLS] vector, using fresh random scenes drawn from `seed`.
    pub fn specialization_report(
        &self,
        groups: &[LayerGroup],
        noise_scale: f64,
        n_train: usize,
        n_test: usize,
        seed: u64,
    ) -> Result<Vec<AttributeProbe>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Result<Vec<(Vec<usize>, LayerStack)>> {
            (0..n)
                .map(|_| {
                    let values: Vec<usize> = groups.iter().map(|_| rng.random_range(0..self.n_values)).collect();
                    let spec = SceneSpec {
                        attributes: groups
                            .iter()
                            .zip(&values)
                            .map(|(&group, &value)| GroupAttribute { group, value })
                            .collect(),
                        scene_class: Some(rng.random_range(0..self.n_values)),
                        noise_scale,
                        seed: rng.random(),
                    };
                    Ok((values, self.generate_stack(&spec)?))
                })
                .collect()
        };
        let train = draw(n_train)?;
        let test = draw(n_test)?;
        let mut out = Vec::with_capacity(groups.len());
        for (gi, &group) in groups.iter().enumerate() {
            let mut per_layer = Vec::with_capacity(self.dims.layers);
            for l in 1..=self.dims.layers {
                let feats = |set: &[(Vec<usize>, LayerStack)]| -> Vec<Vec<f64>> {
                    set.iter().map(|(_, s)| s.cls_features().row(l - 1).to_vec()).collect()
                };
                let labels = |set: &[(Vec<usize>, LayerStack)]| -> Vec<usize> { set.iter().map(|(v, _)| v[gi]).collect() };
                let probe = LinearProbe::fit(&feats(&train), &labels(&train), self.n_values, 1e-6)?;
                per_layer.push(probe.accuracy(&feats(&test), &labels(&test)));
            }
            out.push(AttributeProbe { group, per_layer });
        }
        Ok(out)
    }
}

/// Gram-Schmidt over the rows of `m`, dropping near-dependent rows.
fn orthonormal_rows(m: &DenseArray) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in 0..m.rows() {
        let mut v = m.row(r).to_vec();
        for q in &basis {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Remove the span of `basis` from every row of `m`, then scale by `rescale`.
fn project_out(m: &DenseArray, basis: &[Vec<f64>], rescale: f64) -> Result<DenseArray> {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.rows() {
        let mut v = m.row(r).to_vec();
        for q in basis {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        data.extend(v.into_iter().map(|x| x * rescale));
    }
    DenseArray::new(m.shape().to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeProbe {
    pub group: LayerGroup,
    /// accuracy when probing layer `l` at index `l−1`
    pub per_layer: Vec<f64>,
}

impl AttributeProbe {
    /// Worst home-layer accuracy minus best non-home accuracy.
    pub fn specialization_margin(&self) -> f64 {
        let mut home = f64::INFINITY;
        let mut away = f64::NEG_INFINITY;
        for (i, &a) in self.per_layer.iter().enumerate() {
            if self.group.contains(i + 1) {
                home = home.min(a);
            } else {
                away = away.max(a);
            }
        }
        home - away
    }
}

/// Least-squares linear classifier on one-hot targets (ridge-stabilized).
#[derive(Debug, Clone)]
pub struct LinearProbe {
    weights: DMatrix<f64>,
}

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], n_classes: usize, ridge: f64) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != labels.len() {
            return Err(Error::Data("probe needs matching nonempty features and labels".into()));
        }
        let d = features[0].len() + 1;
        let x = DMatrix::from_fn(n, d, |i, j| if j + 1 == d { 1.0 } else { features[i][j] });
        let y = DMatrix::from_fn(n, n_classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
        let gram = x.transpose() * &x + DMatrix::identity(d, d) * ridge;
        let rhs = x.transpose() * y;
        let weights = gram
            .cholesky()
            .ok_or_else(|| Error::Data("probe normal equations not positive definite".into()))?
            .solve(&rhs);
        Ok(Self { weights })
    }

    pub fn predict(&self, feature: &[f64]) -> usize {
        let d = self.weights.nrows();
        let x = DVector::from_fn(d, |j, _| if j + 1 == d { 1.0 } else { feature[j] });
        let scores = self.weights.transpose() * x;
        scores.argmax().0
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &y)| self.predict(f) == y)
            .count();
        hits as f64 / labels.len().max(1) as f64
    }
}
