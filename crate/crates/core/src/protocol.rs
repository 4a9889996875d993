//! Declarative experiment runner: identity-disjoint splits, optional
//! cross-domain mixing, training, and per-dataset / per-species reporting.
//!
//! Intra-dataset, cross-dataset and mixed-training protocols differ only in
//! their config files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport, ScoreRecord};
use crate::network::{grid_search_lr, save_checkpoint, train, Checkpoint, MlpParams, TrainConfig};
use crate::rng::{derive_seed, rng_from_seed, sample_without_replacement, shuffle};
use crate::scoring::{build_template, score_dataset, ScoreOptions, DEFAULT_TEMPLATE_K};
use crate::synth::{make_dataset, Dataset, GenerationSpec, Sample};

const STREAM_SPLIT: u64 = 21;
const STREAM_SUBSAMPLE: u64 = 22;
const STREAM_MIX: u64 = 23;
const STREAM_TEMPLATE: u64 = 24;
const STREAM_TRAIN: u64 = 25;

pub const REPORT_FILE: &str = "report.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
/// Species name used for DET files of the pooled attack set.
pub const POOLED_SPECIES: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSource {
    pub tag: String,
    /// Share of the source's training partition that is used, in `(0, 1]`.
    #[serde(default = "one")]
    pub fraction: f64,
}

fn one() -> f64 {
    1.0
}

/// Where a dataset comes from: a generation spec or a directory written by
/// `synth`. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default)]
    pub spec: Option<PathBuf>,
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Drives the split, subsampling, mixing, templates and training.
    pub seed: u64,
    #[serde(default = "default_template_k")]
    pub template_k: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub train_sources: Vec<TrainSource>,
    pub test_sources: Vec<String>,
    /// Share of the final training set taken from `mix_source`.
    #[serde(default)]
    pub mix_digital_fraction: f64,
    #[serde(default)]
    pub mix_source: Option<String>,
    /// Mix morphs as well as bona fide samples from `mix_source`.
    #[serde(default)]
    pub mix_morphs: bool,
    #[serde(default)]
    pub save_model: bool,
    #[serde(default)]
    pub train: TrainConfig,
    pub datasets: BTreeMap<String, DatasetSource>,
}

fn default_template_k() -> usize {
    DEFAULT_TEMPLATE_K
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a config and makes its dataset paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for source in config.datasets.values_mut() {
            for p in [&mut source.spec, &mut source.dir].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serialises")
    }

    /// Replaces the experiment seed; training follows it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("experiment '{}': {msg}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "bad experiment name '{}'",
                self.name
            )));
        }
        check_fractions(self.split_train, self.split_val)?;
        if self.template_k == 0 {
            return bad("template_k must be at least 1".into());
        }
        if self.train_sources.is_empty() {
            return bad("no train sources".into());
        }
        if self.test_sources.is_empty() {
            return bad("no test sources".into());
        }
        for (tag, source) in &self.datasets {
            if source.spec.is_some() == source.dir.is_some() {
                return bad(format!("dataset '{tag}' needs exactly one of spec or dir"));
            }
        }
        let mut seen = BTreeSet::new();
        for s in &self.train_sources {
            if !(s.fraction > 0.0 && s.fraction <= 1.0) {
                return bad(format!("train fraction for '{}' must be in (0, 1]", s.tag));
            }
            if !seen.insert(&s.tag) {
                return bad(format!("train source '{}' listed twice", s.tag));
            }
        }
        let mut seen = BTreeSet::new();
        for t in &self.test_sources {
            if !seen.insert(t) {
                return bad(format!("test source '{t}' listed twice"));
            }
        }
        let referenced = self
            .train_sources
            .iter()
            .map(|s| &s.tag)
            .chain(&self.test_sources)
            .chain(&self.mix_source);
        for tag in referenced {
            if !self.datasets.contains_key(tag) {
                return bad(format!("dataset '{tag}' is not defined"));
            }
        }
        if !(0.0..1.0).contains(&self.mix_digital_fraction) {
            return bad("mix_digital_fraction must be in [0, 1)".into());
        }
        if self.mix_digital_fraction > 0.0 && self.mix_source.is_none() {
            return bad("mix_digital_fraction is set but mix_source is not".into());
        }
        if self.mix_digital_fraction == 0.0 && (self.mix_source.is_some() || self.mix_morphs) {
            return bad("mix_source given without a mix_digital_fraction".into());
        }
        self.train.validate()
    }
}

fn check_fractions(train: f64, val: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 + 1e-12 {
        return Err(Error::Config(format!(
            "split fractions {train} + {val} must be in [0, 1] and sum to at most 1"
        )));
    }
    Ok(())
}

/// Identity-disjoint partition of sample ids, each list in input order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Assigns whole identities to train, validation and test. A morph belongs
/// to its lexicographically smaller parent. Identity groups are shuffled
/// (seeded) and cut at `round(n * train_frac)` and
/// `round(n * (train_frac + val_frac))`.
pub fn split(samples: &[Sample], train_frac: f64, val_frac: f64, seed: u64) -> Result<Split> {
    check_fractions(train_frac, val_frac)?;
    let mut groups: Vec<&str> = samples
        .iter()
        .map(Sample::owner_identity)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    shuffle(&mut rng_from_seed(seed), &mut groups);
    let n = groups.len() as f64;
    let cut_train = (n * train_frac).round() as usize;
    let cut_val = ((n * (train_frac + val_frac)).round() as usize).min(groups.len());
    let side: BTreeMap<&str, usize> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| (*g, usize::from(i >= cut_train) + usize::from(i >= cut_val)))
        .collect();
    let mut out = Split::default();
    for s in samples {
        let list = match side[s.owner_identity()] {
            0 => &mut out.train,
            1 => &mut out.val,
            _ => &mut out.test,
        };
        list.push(s.sample_id.clone());
    }
    Ok(out)
}

fn select<'a>(samples: &'a [Sample], ids: &[String]) -> Vec<&'a Sample> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    samples
        .iter()
        .filter(|s| wanted.contains(s.sample_id.as_str()))
        .collect()
}

/// Seeded subset of `k` items, kept in their original order.
fn subsample<'a>(items: &[&'a Sample], k: usize, seed: u64) -> Vec<&'a Sample> {
    let mut picks = sample_without_replacement(&mut rng_from_seed(seed), items.len(), k);
    picks.sort_unstable();
    picks.into_iter().map(|i| items[i]).collect()
}

/// Loads or generates every dataset named in the config.
pub fn load_datasets(config: &ExperimentConfig) -> Result<BTreeMap<String, Dataset>> {
    config
        .datasets
        .iter()
        .map(|(tag, source)| {
            let dataset = match (&source.spec, &source.dir) {
                (Some(spec), None) => make_dataset(&GenerationSpec::load(spec)?)?,
                (None, Some(dir)) => Dataset::load(dir)?,
                _ => {
                    return Err(Error::Config(format!(
                        "dataset '{tag}' needs exactly one of spec or dir"
                    )))
                }
            };
            if dataset.manifest.dataset_tag != *tag {
                return Err(Error::Config(format!(
                    "dataset '{tag}' holds samples tagged '{}'",
                    dataset.manifest.dataset_tag
                )));
            }
            Ok((tag.clone(), dataset))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub dataset: String,
    pub template_ids: Vec<String>,
    pub records: Vec<ScoreRecord>,
    pub report: MetricReport,
    pub det: BTreeMap<String, Vec<metrics::DetPoint>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub train_bonafide: usize,
    pub train_morphs: usize,
    pub mixed_in: usize,
    pub validation_samples: usize,
    pub learning_rate: f64,
    /// Final validation EER per grid point; empty when no search ran.
    pub grid: Vec<(f64, f64)>,
    pub final_loss: f64,
    pub params: MlpParams,
    pub tests: Vec<TestResult>,
    /// Metrics over the union of every test dataset's records.
    pub pooled: MetricReport,
}

impl ExperimentReport {
    pub fn test(&self, dataset: &str) -> Option<&TestResult> {
        self.tests.iter().find(|t| t.dataset == dataset)
    }
}

/// Runs one experiment end to end. Output is a pure function of the config
/// and the referenced datasets.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let datasets = load_datasets(config)?;
    run_with_datasets(config, &datasets)
}

pub fn run_with_datasets(
    config: &ExperimentConfig,
    datasets: &BTreeMap<String, Dataset>,
) -> Result<ExperimentReport> {
    config.validate()?;
    let get = |tag: &str| {
        datasets
            .get(tag)
            .ok_or_else(|| Error::Config(format!("dataset '{tag}' was not loaded")))
    };
    let split_seed = derive_seed(config.seed, STREAM_SPLIT, 0);
    let mut splits = BTreeMap::new();
    for tag in config.datasets.keys() {
        let ds = get(tag)?;
        splits.insert(
            tag.as_str(),
            split(
                &ds.samples,
                config.split_train,
                config.split_val,
                split_seed,
            )?,
        );
    }

    let mut train_set: Vec<&Sample> = Vec::new();
    let mut validation: Vec<&Sample> = Vec::new();
    for (i, source) in config.train_sources.iter().enumerate() {
        let ds = get(&source.tag)?;
        let part = select(&ds.samples, &splits[source.tag.as_str()].train);
        let keep = (part.len() as f64 * source.fraction).round() as usize;
        train_set.extend(subsample(
            &part,
            keep,
            derive_seed(config.seed, STREAM_SUBSAMPLE, i as u64),
        ));
        validation.extend(select(&ds.samples, &splits[source.tag.as_str()].val));
    }

    let mut mixed_in = 0;
    if let Some(tag) = &config.mix_source {
        let ds = get(tag)?;
        let pool: Vec<&Sample> = select(&ds.samples, &splits[tag.as_str()].train)
            .into_iter()
            .filter(|s| config.mix_morphs || s.is_bona_fide())
            .collect();
        let f = config.mix_digital_fraction;
        let wanted = (f / (1.0 - f) * train_set.len() as f64).round() as usize;
        if wanted > pool.len() {
            return Err(Error::Config(format!(
                "mixing needs {wanted} samples from '{tag}' but its training partition offers {}",
                pool.len()
            )));
        }
        mixed_in = wanted;
        train_set.extend(subsample(
            &pool,
            wanted,
            derive_seed(config.seed, STREAM_MIX, 0),
        ));
    }

    let dims: BTreeSet<usize> = train_set.iter().map(|s| s.features.len()).collect();
    if dims.len() > 1 {
        return Err(Error::Config(
            "train sources have different feature dimensions".into(),
        ));
    }
    let train_owned: Vec<Sample> = train_set.into_iter().cloned().collect();
    let validation_owned: Vec<Sample> = validation.into_iter().cloned().collect();
    let train_config = TrainConfig {
        seed: derive_seed(config.seed, STREAM_TRAIN, 0),
        ..config.train.clone()
    };

    let (outcome, learning_rate, grid) = if train_config.lr_grid.len() > 1 {
        if validation_owned.is_empty() {
            return Err(Error::Config(
                "learning-rate grid search needs split_val > 0".into(),
            ));
        }
        let result = grid_search_lr(&train_owned, &validation_owned, &train_config)?;
        (result.best, result.best_lr, result.per_lr)
    } else {
        let lr = train_config
            .lr_grid
            .first()
            .copied()
            .unwrap_or(train_config.learning_rate);
        let cfg = TrainConfig {
            learning_rate: lr,
            ..train_config
        };
        let validation = (!validation_owned.is_empty()).then_some(validation_owned.as_slice());
        (train(&train_owned, validation, &cfg)?, lr, Vec::new())
    };
    let params = outcome.params;

    let tests = config
        .test_sources
        .par_iter()
        .enumerate()
        .map(|(i, tag)| {
            let ds = get(tag)?;
            let held_out = select(&ds.samples, &splits[tag.as_str()].test);
            evaluate_test(
                tag,
                &held_out,
                &params,
                config.template_k,
                derive_seed(config.seed, STREAM_TEMPLATE, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let all_records: Vec<ScoreRecord> = tests
        .iter()
        .flat_map(|t| t.records.iter().cloned())
        .collect();
    let pooled = metrics::evaluate(&all_records)?;

    Ok(ExperimentReport {
        config: config.clone(),
        train_bonafide: train_owned.iter().filter(|s| s.is_bona_fide()).count(),
        train_morphs: train_owned.iter().filter(|s| !s.is_bona_fide()).count(),
        mixed_in,
        validation_samples: validation_owned.len(),
        learning_rate,
        grid,
        final_loss: outcome.history.last().map_or(0.0, |e| e.loss),
        params,
        tests,
        pooled,
    })
}

fn evaluate_test(
    tag: &str,
    held_out: &[&Sample],
    params: &MlpParams,
    k: usize,
    seed: u64,
) -> Result<TestResult> {
    let bona_fide: Vec<&Sample> = held_out
        .iter()
        .copied()
        .filter(|s| s.is_bona_fide())
        .collect();
    if bona_fide.len() <= k {
        return Err(Error::Config(format!(
            "test partition of '{tag}' has {} bona fide samples; the template alone needs {k}",
            bona_fide.len()
        )));
    }
    let template = build_template(&bona_fide, params, k, seed)?;
    let owned: Vec<Sample> = held_out.iter().map(|s| (*s).clone()).collect();
    let records = score_dataset(&owned, params, &template, ScoreOptions::default())?;
    let report = metrics::evaluate(&records)?;

    let (bf, by_species) = metrics::split_scores(&records);
    let mut det = BTreeMap::new();
    let pooled_attacks: Vec<f64> = by_species.values().flatten().copied().collect();
    det.insert(
        POOLED_SPECIES.to_string(),
        metrics::det_curve(&bf, &pooled_attacks)?,
    );
    for (species, scores) in &by_species {
        det.insert(species.clone(), metrics::det_curve(&bf, scores)?);
    }
    Ok(TestResult {
        dataset: tag.to_string(),
        template_ids: template.source_ids,
        records,
        report,
        det,
    })
}

/// Rates as percentages with two decimals.
pub fn pct(rate: f64) -> String {
    format!("{:.2}", rate * 100.0)
}

fn push_metrics(out: &mut String, prefix: &str, eer: f64, bpcer10: f64, bpcer20: f64) {
    let _ = writeln!(out, "{prefix}.eer_pct: {}", pct(eer));
    let _ = writeln!(out, "{prefix}.bpcer10_pct: {}", pct(bpcer10));
    let _ = writeln!(out, "{prefix}.bpcer20_pct: {}", pct(bpcer20));
}

/// Plain `key: value` summary, one line per fact, in a fixed order.
pub fn render_report(report: &ExperimentReport) -> String {
    let c = &report.config;
    let mut out = String::new();
    let _ = writeln!(out, "experiment: {}", c.name);
    let _ = writeln!(out, "seed: {}", c.seed);
    let train_tags: Vec<String> = c
        .train_sources
        .iter()
        .map(|s| format!("{}*{}", s.tag, s.fraction))
        .collect();
    let _ = writeln!(out, "train_sources: {}", train_tags.join(" "));
    let _ = writeln!(out, "test_sources: {}", c.test_sources.join(" "));
    let _ = writeln!(out, "train_bonafide: {}", report.train_bonafide);
    let _ = writeln!(out, "train_morphs: {}", report.train_morphs);
    if let Some(tag) = &c.mix_source {
        let _ = writeln!(out, "mix_source: {tag}");
        let _ = writeln!(out, "mix_digital_pct: {}", pct(c.mix_digital_fraction));
        let _ = writeln!(out, "mixed_in: {}", report.mixed_in);
    }
    let _ = writeln!(out, "validation_samples: {}", report.validation_samples);
    for (lr, eer) in &report.grid {
        let _ = writeln!(out, "grid.lr_{lr:e}.val_eer_pct: {}", pct(*eer));
    }
    let _ = writeln!(out, "learning_rate: {:e}", report.learning_rate);
    let _ = writeln!(out, "epochs: {}", c.train.epochs);
    let _ = writeln!(out, "final_loss: {:.6}", report.final_loss);
    for t in &report.tests {
        let r = &t.report;
        let p = format!("test.{}", t.dataset);
        let _ = writeln!(out, "{p}.probes: {}", t.records.len());
        let _ = writeln!(out, "{p}.eer_threshold: {:.6}", r.eer_threshold);
        push_metrics(
            &mut out,
            &format!("{p}.{POOLED_SPECIES}"),
            r.eer,
            r.bpcer10,
            r.bpcer20,
        );
        for (species, m) in &r.per_species {
            push_metrics(
                &mut out,
                &format!("{p}.{species}"),
                m.eer,
                m.bpcer10,
                m.bpcer20,
            );
        }
    }
    let r = &report.pooled;
    push_metrics(&mut out, "pooled", r.eer, r.bpcer10, r.bpcer20);
    out
}

pub fn det_file_name(dataset: &str, species: &str) -> String {
    format!("det_{dataset}_{species}.csv")
}

pub fn scores_file_name(dataset: &str) -> String {
    format!("scores_{dataset}.csv")
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes `report.txt`, the score and DET CSVs, and the model when the
/// config asks for it. Returns the paths written, in order.
pub fn write_report_dir(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, render_report(report)).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    for t in &report.tests {
        let path = dir.join(scores_file_name(&t.dataset));
        metrics::write_scores(create(&path)?, &t.records)?;
        written.push(path);
        for (species, points) in &t.det {
            let path = dir.join(det_file_name(&t.dataset, species));
            metrics::write_det(create(&path)?, points)?;
            written.push(path);
        }
    }
    if report.config.save_model {
        let path = dir.join(CHECKPOINT_FILE);
        let checkpoint = Checkpoint {
            params: report.params.clone(),
            margin: report.config.train.margin,
            seed: report.config.seed,
        };
        save_checkpoint(&path, &checkpoint)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::ToolRef;

    fn small_dataset(tag: &str, seed: u64) -> Dataset {
        let spec = GenerationSpec {
            identities: 30,
            bonafide_per_identity: 3,
            tools: vec![
                ToolRef::Preset("opencv".into()),
                ToolRef::Preset("ubo".into()),
            ],
            morphs_per_tool: 20,
            ..GenerationSpec::desk_default(tag, seed)
        };
        make_dataset(&spec).unwrap()
    }

    fn small_config() -> ExperimentConfig {
        let text = r#"
            name = "tiny"
            seed = 3
            split_train = 0.6
            split_val = 0.2
            train_sources = [{ tag = "a" }]
            test_sources = ["a"]
            [train]
            epochs = 2
            batch_size = 32
            hidden = [8]
            embedding_dim = 4
            lr_grid = [1e-3]
            [datasets.a]
            spec = "a.toml"
        "#;
        ExperimentConfig::from_toml(text).unwrap()
    }

    fn owners(samples: &[Sample], ids: &[String]) -> BTreeSet<String> {
        select(samples, ids)
            .iter()
            .map(|s| s.owner_identity().to_string())
            .collect()
    }

    #[test]
    fn split_is_identity_disjoint_and_complete() {
        let ds = small_dataset("a", 1);
        for seed in 0..20 {
            let s = split(&ds.samples, 0.5, 0.25, seed).unwrap();
            assert_eq!(s.train.len() + s.val.len() + s.test.len(), ds.samples.len());
            let (tr, va, te) = (
                owners(&ds.samples, &s.train),
                owners(&ds.samples, &s.val),
                owners(&ds.samples, &s.test),
            );
            assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            assert_eq!(s, split(&ds.samples, 0.5, 0.25, seed).unwrap());
        }
    }

    #[test]
    fn morph_follows_smaller_parent() {
        let ds = small_dataset("a", 2);
        let s = split(&ds.samples, 0.5, 0.0, 4).unwrap();
        let train: BTreeSet<&str> = s.train.iter().map(String::as_str).collect();
        for m in ds.samples.iter().filter(|m| !m.is_bona_fide()) {
            let parent = m.parent_ids.iter().min().unwrap();
            let parent_bf = ds
                .samples
                .iter()
                .find(|b| b.is_bona_fide() && &b.parent_ids[0] == parent)
                .unwrap();
            assert_eq!(
                train.contains(m.sample_id.as_str()),
                train.contains(parent_bf.sample_id.as_str())
            );
        }
    }

    #[test]
    fn full_train_fraction_leaves_nothing_else() {
        let ds = small_dataset("a", 1);
        let s = split(&ds.samples, 1.0, 0.0, 9).unwrap();
        assert_eq!(s.train.len(), ds.samples.len());
        assert!(s.val.is_empty() && s.test.is_empty());
        assert!(split(&ds.samples, 0.7, 0.4, 9).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(small_config().validate().is_ok());
        let mut c = small_config();
        c.test_sources.clear();
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.test_sources = vec!["missing".into()];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.mix_digital_fraction = 0.2;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.train_sources[0].fraction = 0.0;
        assert!(c.validate().is_err());
        let text = small_config().to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), small_config());
        assert!(ExperimentConfig::from_toml("name = \"x\"\nbogus = 1").is_err());
    }

    #[test]
    fn run_is_deterministic_and_covers_every_species() {
        let mut datasets = BTreeMap::new();
        datasets.insert("a".to_string(), small_dataset("a", 5));
        let config = small_config();
        let r1 = run_with_datasets(&config, &datasets).unwrap();
        let r2 = run_with_datasets(&config, &datasets).unwrap();
        assert_eq!(render_report(&r1), render_report(&r2));
        assert_eq!(r1, r2);
        let t = r1.test("a").unwrap();
        assert_eq!(
            t.det.keys().cloned().collect::<Vec<_>>(),
            vec!["all".to_string(), "opencv".into(), "ubo".into()]
        );
        // Pooled attacks are the union of species attacks.
        let (_, by_species) = metrics::split_scores(&t.records);
        let n: usize = by_species.values().map(Vec::len).sum();
        assert_eq!(n, t.records.iter().filter(|r| r.label.is_attack()).count());
        assert!(t
            .records
            .iter()
            .all(|r| !t.template_ids.contains(&r.probe_id)));
    }

    #[test]
    fn mixing_adds_the_requested_share() {
        let mut datasets = BTreeMap::new();
        datasets.insert("a".to_string(), small_dataset("a", 5));
        datasets.insert("b".to_string(), small_dataset("b", 6));
        let mut config = small_config();
        config.datasets.insert(
            "b".into(),
            DatasetSource {
                spec: Some("b.toml".into()),
                dir: None,
            },
        );
        config.mix_source = Some("b".into());
        config.mix_digital_fraction = 0.2;
        let r = run_with_datasets(&config, &datasets).unwrap();
        let total = r.train_bonafide + r.train_morphs;
        assert!(r.mixed_in > 0);
        assert!((r.mixed_in as f64 / total as f64 - 0.2).abs() < 0.02);
    }

    #[test]
    fn percentages_have_two_decimals() {
        assert_eq!(pct(0.0349), "3.49");
        assert_eq!(pct(0.0), "0.00");
        assert_eq!(pct(0.2912), "29.12");
    }
}
