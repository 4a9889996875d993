//! Synthetic stand-ins for face datasets.
//!
//! Identities are Gaussian clusters in feature space. Bona fide samples are
//! noisy draws around an identity mean. A morph is the convex combination of
//! two bona fide samples from different identities followed by a
//! tool-specific perturbation (neighbour smoothing plus a seeded artifact
//! pattern). A "digital" dataset is produced from a "synthetic" one by an
//! affine domain shift with additive noise.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::rng::{derive_seed, rng_from_seed, sample_without_replacement, DetRng};

pub const DEFAULT_INPUT_DIM: usize = 16;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SAMPLES_FILE: &str = "samples.csv";

/// Names of the built-in tool operators.
pub const TOOL_NAMES: [&str; 6] = [
    "facefusion",
    "facemorpher",
    "opencv",
    "ubo",
    "webmorph",
    "stylegan",
];

// Seed streams.
const STREAM_IDENTITIES: u64 = 1;
const STREAM_BONAFIDE: u64 = 2;
const STREAM_PAIRS: u64 = 3;
const STREAM_MORPH: u64 = 4;
const STREAM_SIGNATURE: u64 = 5;
const STREAM_JITTER: u64 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityModel {
    pub identity_id: String,
    pub mean: Vec<f64>,
    pub intra_spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub features: Vec<f64>,
    pub label: Label,
    /// Tool name for morphs, empty for bona fide.
    pub species: String,
    /// The subject identity for bona fide samples, both contributing
    /// identities for morphs.
    pub parent_ids: Vec<String>,
    pub dataset_tag: String,
}

impl Sample {
    pub fn is_bona_fide(&self) -> bool {
        self.label == Label::BonaFide
    }

    /// Identity that owns this sample for identity-disjoint splitting: the
    /// subject of a bona fide sample, the lexicographically smaller parent of
    /// a morph.
    pub fn owner_identity(&self) -> &str {
        self.parent_ids
            .iter()
            .min()
            .map(String::as_str)
            .unwrap_or("")
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.label {
            Label::BonaFide => self.species.is_empty() && self.parent_ids.len() == 1,
            Label::Attack => {
                !self.species.is_empty()
                    && self.parent_ids.len() == 2
                    && self.parent_ids[0] != self.parent_ids[1]
            }
        };
        if !ok {
            return Err(Error::invalid(format!(
                "sample {} has inconsistent label/species/parents",
                self.sample_id
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of {}", self.sample_id)));
        }
        Ok(())
    }
}

/// Post-combination perturbation standing in for one morphing tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolOperator {
    pub name: String,
    /// Scale of the artifact pattern added after combination.
    pub amplitude: f64,
    /// Blend weight towards the circular 3-neighbour average, in `[0, 1)`.
    pub smoothing: f64,
    /// Per-morph noise around the signature, relative to it.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    pub seed: u64,
}

fn default_jitter() -> f64 {
    0.25
}

impl ToolOperator {
    /// Zero-perturbation operator.
    pub fn identity(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            amplitude: 0.0,
            smoothing: 0.0,
            jitter: 0.0,
            seed: 0,
        }
    }

    /// Built-in operators, ordered roughly from most to least visible
    /// artifacts.
    pub fn preset(name: &str) -> Option<Self> {
        let (amplitude, smoothing, jitter, seed) = match name {
            "facemorpher" => (1.30, 0.30, 0.25, 101),
            "opencv" => (1.25, 0.25, 0.25, 102),
            "stylegan" => (1.20, 0.15, 0.25, 103),
            "webmorph" => (1.10, 0.15, 0.25, 106),
            "ubo" => (0.90, 0.20, 0.25, 104),
            "facefusion" => (0.80, 0.20, 0.25, 105),
            _ => return None,
        };
        Some(Self {
            name: name.to_string(),
            amplitude,
            smoothing,
            jitter,
            seed,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(',') {
            return Err(Error::invalid(format!("bad tool name '{}'", self.name)));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::invalid(format!(
                "tool {}: amplitude must be >= 0",
                self.name
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::invalid(format!(
                "tool {}: jitter must be >= 0",
                self.name
            )));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::invalid(format!(
                "tool {}: smoothing must be in [0, 1)",
                self.name
            )));
        }
        Ok(())
    }

    /// Fixed per-tool artifact direction, scaled to length `sqrt(dim)` so
    /// that `amplitude` alone sets how visible the tool is.
    pub fn signature(&self, dim: usize) -> Vec<f64> {
        let mut rng = rng_from_seed(derive_seed(self.seed, STREAM_SIGNATURE, 0));
        let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = (dim as f64).sqrt() / norm;
        raw.into_iter().map(|v| v * scale).collect()
    }

    /// Artifact added to one morph: `amplitude * (signature + jitter * z)`
    /// with `z` standard normal per coordinate.
    pub fn perturbation(&self, dim: usize, morph_key: u64) -> Vec<f64> {
        if self.amplitude == 0.0 {
            return vec![0.0; dim];
        }
        let mut rng = rng_from_seed(derive_seed(self.seed, STREAM_JITTER, morph_key));
        self.signature(dim)
            .into_iter()
            .map(|s| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.amplitude * (s + self.jitter * z)
            })
            .collect()
    }

    pub fn transform(&self, combined: &[f64], morph_key: u64) -> Vec<f64> {
        let n = combined.len();
        let smoothed: Vec<f64> = if self.smoothing == 0.0 {
            combined.to_vec()
        } else {
            (0..n)
                .map(|i| {
                    let avg =
                        (combined[(i + n - 1) % n] + combined[i] + combined[(i + 1) % n]) / 3.0;
                    (1.0 - self.smoothing) * combined[i] + self.smoothing * avg
                })
                .collect()
        };
        smoothed
            .iter()
            .zip(self.perturbation(n, morph_key))
            .map(|(x, p)| x + p)
            .collect()
    }
}

pub fn gen_identities(
    n: usize,
    dim: usize,
    inter_spread: f64,
    intra_spread: f64,
    seed: u64,
    id_prefix: &str,
) -> Result<Vec<IdentityModel>> {
    if n == 0 {
        return Err(Error::invalid("need at least one identity"));
    }
    if dim < 2 {
        return Err(Error::invalid("feature dimension must be at least 2"));
    }
    if !(inter_spread > 0.0 && intra_spread > 0.0)
        || !inter_spread.is_finite()
        || !intra_spread.is_finite()
    {
        return Err(Error::invalid("spreads must be positive and finite"));
    }
    let mut rng = rng_from_seed(seed);
    Ok((0..n)
        .map(|i| IdentityModel {
            identity_id: format!("{id_prefix}i{i:05}"),
            mean: (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    inter_spread * z
                })
                .collect(),
            intra_spread,
        })
        .collect())
}

pub fn sample_bonafide(
    identity: &IdentityModel,
    count: usize,
    seed: u64,
    dataset_tag: &str,
) -> Vec<Sample> {
    let mut rng = rng_from_seed(seed);
    (0..count)
        .map(|j| Sample {
            sample_id: format!("{}_b{j:03}", identity.identity_id),
            features: identity
                .mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + identity.intra_spread * z
                })
                .collect(),
            label: Label::BonaFide,
            species: String::new(),
            parent_ids: vec![identity.identity_id.clone()],
            dataset_tag: dataset_tag.to_string(),
        })
        .collect()
}

/// `tool.transform(alpha * a + (1 - alpha) * b)`.
pub fn morph(
    sample_a: &Sample,
    sample_b: &Sample,
    alpha: f64,
    tool: &ToolOperator,
    morph_key: u64,
    sample_id: impl Into<String>,
) -> Result<Sample> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!(
            "morph factor {alpha} outside (0, 1)"
        )));
    }
    if !sample_a.is_bona_fide() || !sample_b.is_bona_fide() {
        return Err(Error::invalid("morph parents must be bona fide"));
    }
    if sample_a.parent_ids == sample_b.parent_ids {
        return Err(Error::invalid(format!(
            "morph parents share identity {}",
            sample_a.owner_identity()
        )));
    }
    if sample_a.features.len() != sample_b.features.len() {
        return Err(Error::DimensionMismatch {
            expected: sample_a.features.len(),
            actual: sample_b.features.len(),
        });
    }
    tool.validate()?;
    let combined: Vec<f64> = sample_a
        .features
        .iter()
        .zip(&sample_b.features)
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    Ok(Sample {
        sample_id: sample_id.into(),
        features: tool.transform(&combined, morph_key),
        label: Label::Attack,
        species: tool.name.clone(),
        parent_ids: vec![
            sample_a.parent_ids[0].clone(),
            sample_b.parent_ids[0].clone(),
        ],
        dataset_tag: sample_a.dataset_tag.clone(),
    })
}

/// Affine map `x -> A x + t` followed by seeded isotropic noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    pub linear: DMatrix<f64>,
    pub translation: Vec<f64>,
    pub noise_scale: f64,
    pub seed: u64,
}

/// Declarative shift parameters as they appear in dataset spec files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    /// Givens rotation angle (radians) applied to seeded coordinate pairs.
    #[serde(default)]
    pub rotation_angle: f64,
    #[serde(default = "one")]
    pub scale: f64,
    /// Length of the translation vector (its direction is seeded).
    #[serde(default)]
    pub translation_norm: f64,
    #[serde(default)]
    pub noise_scale: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl DomainShift {
    pub fn identity(dim: usize) -> Self {
        Self {
            linear: DMatrix::identity(dim, dim),
            translation: vec![0.0; dim],
            noise_scale: 0.0,
            seed: 0,
        }
    }

    pub fn translation(t: Vec<f64>) -> Self {
        let dim = t.len();
        Self {
            linear: DMatrix::identity(dim, dim),
            translation: t,
            noise_scale: 0.0,
            seed: 0,
        }
    }

    /// `scale * R` where `R` rotates seeded disjoint coordinate pairs by
    /// `rotation_angle`, plus a translation of the given length in a seeded
    /// direction.
    pub fn from_spec(spec: &ShiftSpec, dim: usize) -> Result<Self> {
        let mut rng = rng_from_seed(spec.seed);
        let order = sample_without_replacement(&mut rng, dim, dim);
        let mut linear = DMatrix::identity(dim, dim);
        let (c, s) = (spec.rotation_angle.cos(), spec.rotation_angle.sin());
        for pair in order.chunks_exact(2) {
            let (i, j) = (pair[0], pair[1]);
            linear[(i, i)] = c;
            linear[(i, j)] = -s;
            linear[(j, i)] = s;
            linear[(j, j)] = c;
        }
        linear *= spec.scale;
        let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let translation = dir
            .iter()
            .map(|v| spec.translation_norm * v / norm)
            .collect();
        let shift = Self {
            linear,
            translation,
            noise_scale: spec.noise_scale,
            seed: derive_seed(spec.seed, 1, 0),
        };
        shift.validate()?;
        Ok(shift)
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.linear.nrows() != d || self.linear.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: self.linear.nrows(),
            });
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid("noise scale must be >= 0"));
        }
        let svd = self.linear.clone().svd(false, false);
        let largest = svd.singular_values.max();
        if !(largest > 0.0) || svd.singular_values.min() <= largest * 1e-12 {
            return Err(Error::invalid("domain shift has a singular linear part"));
        }
        Ok(())
    }
}

pub fn domain_shift(samples: &[Sample], shift: &DomainShift, new_tag: &str) -> Result<Vec<Sample>> {
    shift.validate()?;
    let d = shift.dim();
    let mut rng = rng_from_seed(shift.seed);
    samples
        .iter()
        .map(|s| {
            if s.features.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: s.features.len(),
                });
            }
            let features = (0..d)
                .map(|i| {
                    let mut y = shift.translation[i];
                    for (j, x) in s.features.iter().enumerate() {
                        y += shift.linear[(i, j)] * x;
                    }
                    if shift.noise_scale > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        y += shift.noise_scale * z;
                    }
                    y
                })
                .collect();
            Ok(Sample {
                features,
                dataset_tag: new_tag.to_string(),
                ..s.clone()
            })
        })
        .collect()
}

/// A tool given either by preset name or fully specified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ToolRef {
    Preset(String),
    Custom(ToolOperator),
}

impl ToolRef {
    pub fn resolve(&self) -> Result<ToolOperator> {
        let tool = match self {
            ToolRef::Preset(name) => ToolOperator::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown morph tool '{name}'")))?,
            ToolRef::Custom(t) => t.clone(),
        };
        tool.validate()?;
        Ok(tool)
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSpec {
    pub tag: String,
    pub seed: u64,
    pub identities: usize,
    pub bonafide_per_identity: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "one")]
    pub inter_spread: f64,
    #[serde(default = "default_intra")]
    pub intra_spread: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub tools: Vec<ToolRef>,
    #[serde(default)]
    pub morphs_per_tool: usize,
    #[serde(default)]
    pub shift: Option<ShiftSpec>,
}

fn default_dim() -> usize {
    DEFAULT_INPUT_DIM
}
fn default_intra() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl GenerationSpec {
    /// Desk-scale synthetic training corpus: 200 identities, 16 features,
    /// four tools.
    pub fn desk_default(tag: &str, seed: u64) -> Self {
        Self {
            tag: tag.to_string(),
            seed,
            identities: 200,
            bonafide_per_identity: 4,
            dim: DEFAULT_INPUT_DIM,
            inter_spread: 1.0,
            intra_spread: 0.1,
            alpha: DEFAULT_ALPHA,
            tools: ["opencv", "facemorpher", "webmorph", "stylegan"]
                .iter()
                .map(|t| ToolRef::Preset(t.to_string()))
                .collect(),
            morphs_per_tool: 300,
            shift: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("dataset spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub bonafide: usize,
    pub morph: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_tag: String,
    pub seed: u64,
    pub dim: usize,
    pub samples: usize,
    pub counts: ManifestCounts,
    pub generation: GenerationSpec,
}

impl DatasetManifest {
    pub fn count_samples(samples: &[Sample]) -> ManifestCounts {
        let mut counts = ManifestCounts::default();
        for s in samples {
            match s.label {
                Label::BonaFide => counts.bonafide += 1,
                Label::Attack => *counts.morph.entry(s.species.clone()).or_default() += 1,
            }
        }
        counts
    }

    pub fn matches(&self, samples: &[Sample]) -> bool {
        self.samples == samples.len() && self.counts == Self::count_samples(samples)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

fn sample_pairs(rng: &mut DetRng, n: usize, k: usize) -> Vec<(usize, usize)> {
    let total = n * (n - 1) / 2;
    if 2 * k > total {
        let all: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect();
        return sample_without_replacement(rng, total, k)
            .into_iter()
            .map(|i| all[i])
            .collect();
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j || !seen.insert((i.min(j), i.max(j))) {
            continue;
        }
        out.push((i, j));
    }
    out
}

pub fn make_dataset(spec: &GenerationSpec) -> Result<Dataset> {
    if spec.tag.is_empty() || spec.tag.contains([',', '/', '\\']) {
        return Err(Error::Config(format!("bad dataset tag '{}'", spec.tag)));
    }
    if spec.bonafide_per_identity == 0 {
        return Err(Error::Config(
            "bonafide_per_identity must be at least 1".into(),
        ));
    }
    let tools = spec
        .tools
        .iter()
        .map(ToolRef::resolve)
        .collect::<Result<Vec<_>>>()?;
    let mut names = BTreeSet::new();
    if let Some(t) = tools.iter().find(|t| !names.insert(t.name.clone())) {
        return Err(Error::Config(format!("tool '{}' listed twice", t.name)));
    }
    let max_pairs = spec.identities * spec.identities.saturating_sub(1) / 2;
    if !tools.is_empty() && spec.morphs_per_tool > max_pairs {
        return Err(Error::Config(format!(
            "{} morphs per tool requested but only {max_pairs} distinct identity pairs exist",
            spec.morphs_per_tool
        )));
    }

    let identities = gen_identities(
        spec.identities,
        spec.dim,
        spec.inter_spread,
        spec.intra_spread,
        derive_seed(spec.seed, STREAM_IDENTITIES, 0),
        &format!("{}_", spec.tag),
    )?;
    let per_identity: Vec<Vec<Sample>> = identities
        .iter()
        .enumerate()
        .map(|(i, id)| {
            sample_bonafide(
                id,
                spec.bonafide_per_identity,
                derive_seed(spec.seed, STREAM_BONAFIDE, i as u64),
                &spec.tag,
            )
        })
        .collect();

    let mut samples: Vec<Sample> = per_identity.iter().flatten().cloned().collect();
    for (t, tool) in tools.iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(spec.seed, STREAM_PAIRS, t as u64));
        for (k, (i, j)) in sample_pairs(&mut rng, spec.identities, spec.morphs_per_tool)
            .into_iter()
            .enumerate()
        {
            let a = &per_identity[i][rng.random_range(0..spec.bonafide_per_identity)];
            let b = &per_identity[j][rng.random_range(0..spec.bonafide_per_identity)];
            let key = derive_seed(spec.seed, STREAM_MORPH + t as u64, k as u64);
            let id = format!("{}_m_{}_{k:05}", spec.tag, tool.name);
            samples.push(morph(a, b, spec.alpha, tool, key, id)?);
        }
    }
    if let Some(shift) = &spec.shift {
        samples = domain_shift(
            &samples,
            &DomainShift::from_spec(shift, spec.dim)?,
            &spec.tag,
        )?;
    }

    let manifest = DatasetManifest {
        dataset_tag: spec.tag.clone(),
        seed: spec.seed,
        dim: spec.dim,
        samples: samples.len(),
        counts: DatasetManifest::count_samples(&samples),
        generation: spec.clone(),
    };
    Ok(Dataset { manifest, samples })
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(&self.manifest)
            .map_err(|e| Error::Config(format!("serialising manifest: {e}")))?;
        std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        let samples_path = dir.join(SAMPLES_FILE);
        let file = File::create(&samples_path).map_err(|e| Error::io(&samples_path, e))?;
        write_samples(BufWriter::new(file), &self.samples, self.manifest.dim)
            .map_err(|e| Error::Config(format!("{}: {e}", samples_path.display())))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
        let samples_path = dir.join(SAMPLES_FILE);
        let file = File::open(&samples_path).map_err(|e| Error::io(&samples_path, e))?;
        let samples = read_samples(BufReader::new(file), &samples_path, manifest.dim)?;
        if !manifest.matches(&samples) {
            return Err(Error::Config(format!(
                "{}: manifest counts do not match {}",
                manifest_path.display(),
                SAMPLES_FILE
            )));
        }
        Ok(Self { manifest, samples })
    }
}

pub fn samples_header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "sample_id",
        "label",
        "species",
        "dataset_tag",
        "parent_a",
        "parent_b",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..dim).map(|i| format!("f{i}")));
    h
}

pub fn write_samples<W: std::io::Write>(writer: W, samples: &[Sample], dim: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::invalid(format!("writing samples: {e}"));
    w.write_record(samples_header(dim)).map_err(to_err)?;
    for s in samples {
        if s.features.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: s.features.len(),
            });
        }
        let mut row = vec![
            s.sample_id.clone(),
            s.label.as_sample_token().to_string(),
            s.species.clone(),
            s.dataset_tag.clone(),
            s.parent_ids.first().cloned().unwrap_or_default(),
            s.parent_ids.get(1).cloned().unwrap_or_default(),
        ];
        row.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::invalid(format!("writing samples: {e}")))?;
    Ok(())
}

pub fn read_samples<R: std::io::Read>(reader: R, origin: &Path, dim: usize) -> Result<Vec<Sample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = rdr.records();
    let header = match rows.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(Error::parse(origin, 1, e.to_string())),
        None => return Err(Error::parse(origin, 1, "empty file, expected header")),
    };
    if header.iter().map(str::to_string).collect::<Vec<_>>() != samples_header(dim) {
        return Err(Error::parse(origin, 1, "unexpected samples header"));
    }
    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| {
            Error::parse(origin, e.position().map_or(0, |p| p.line()), e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 6 + dim {
            return Err(Error::parse(
                origin,
                line,
                format!("expected {} fields, got {}", 6 + dim, row.len()),
            ));
        }
        let label: Label = row[1]
            .parse()
            .map_err(|e: String| Error::parse(origin, line, e))?;
        let features = (0..dim)
            .map(|i| row[6 + i].parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(origin, line, format!("bad feature: {e}")))?;
        let parent_ids = [&row[4], &row[5]]
            .into_iter()
            .filter(|p| !p.is_empty())
            .map(str::to_string)
            .collect();
        let sample = Sample {
            sample_id: row[0].to_string(),
            features,
            label,
            species: row[2].to_string(),
            parent_ids,
            dataset_tag: row[3].to_string(),
        };
        sample
            .validate()
            .map_err(|e| Error::parse(origin, line, e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}
