//! Mini-batch training with class-balanced batches and a learning-rate grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adam_step, gradients, AdamState, MlpParams};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::mining::{AnchorMode, DEFAULT_MARGIN};
use crate::rng::{derive_seed, rng_from_seed, shuffle, DetRng};
use crate::scoring::{validation_eer, DEFAULT_TEMPLATE_K};
use crate::synth::Sample;

const STREAM_INIT: u64 = 11;
const STREAM_BATCHES: u64 = 12;
const STREAM_VALIDATION: u64 = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub seed: u64,
    pub lr_grid: Vec<f64>,
    /// Hidden layer widths; the input width comes from the data.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// Half bona fide, half morph per batch.
    pub balanced: bool,
    pub anchor_mode: AnchorMode,
    /// Template size used for validation EER.
    pub template_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 128,
            learning_rate: 1e-4,
            margin: DEFAULT_MARGIN,
            seed: 0,
            lr_grid: vec![1e-3, 5e-4, 1e-4, 5e-5],
            hidden: vec![64, 64],
            embedding_dim: 32,
            balanced: true,
            anchor_mode: AnchorMode::BothClasses,
            template_k: DEFAULT_TEMPLATE_K,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if self.lr_grid.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("lr_grid entries must be positive".into()));
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.template_k == 0 {
            return Err(Error::Config("template_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.embedding_dim);
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub mined: usize,
    pub validation_eer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub history: Vec<EpochStats>,
}

impl TrainOutcome {
    pub fn final_validation_eer(&self) -> Option<f64> {
        self.history.last().and_then(|e| e.validation_eer)
    }
}

/// Endless reshuffled pass over one class.
struct ClassStream {
    indices: Vec<usize>,
    cursor: usize,
}

impl ClassStream {
    fn new(indices: Vec<usize>, rng: &mut DetRng) -> Self {
        let mut s = Self { indices, cursor: 0 };
        shuffle(rng, &mut s.indices);
        s
    }

    fn take(&mut self, n: usize, rng: &mut DetRng, out: &mut Vec<usize>) {
        for _ in 0..n.min(self.indices.len()) {
            if self.cursor == self.indices.len() {
                shuffle(rng, &mut self.indices);
                self.cursor = 0;
            }
            out.push(self.indices[self.cursor]);
            self.cursor += 1;
        }
    }
}

fn epoch_batches(samples: &[Sample], config: &TrainConfig, rng: &mut DetRng) -> Vec<Vec<usize>> {
    let n = samples.len();
    let steps = n.div_ceil(config.batch_size);
    if !config.balanced {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(rng, &mut order);
        return order
            .chunks(config.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
    }
    let (bf, atk): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| samples[i].is_bona_fide());
    let mut bf = ClassStream::new(bf, rng);
    let mut atk = ClassStream::new(atk, rng);
    let half = config.batch_size / 2;
    (0..steps)
        .map(|_| {
            let mut batch = Vec::with_capacity(config.batch_size);
            bf.take(half, rng, &mut batch);
            atk.take(config.batch_size - half, rng, &mut batch);
            batch
        })
        .collect()
}

fn check_dataset(samples: &[Sample]) -> Result<usize> {
    let dim = samples
        .first()
        .map(|s| s.features.len())
        .ok_or_else(|| Error::invalid("empty training set"))?;
    let has = |l: Label| samples.iter().any(|s| s.label == l);
    if !has(Label::BonaFide) || !has(Label::Attack) {
        return Err(Error::invalid(
            "training set must contain both bona fide and morph samples",
        ));
    }
    if let Some(s) = samples.iter().find(|s| s.features.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: s.features.len(),
        });
    }
    Ok(dim)
}

/// Trains from a seeded initialisation. Fully deterministic given
/// `(train_set, validation, config)`.
pub fn train(
    train_set: &[Sample],
    validation: Option<&[Sample]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let dim = check_dataset(train_set)?;
    let mut params = MlpParams::init(
        &config.layer_dims(dim),
        derive_seed(config.seed, STREAM_INIT, 0),
    )?;
    let mut adam = AdamState::new(&params);
    let mut rng = rng_from_seed(derive_seed(config.seed, STREAM_BATCHES, 0));
    let validation_seed = derive_seed(config.seed, STREAM_VALIDATION, 0);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        let mut mined = 0usize;
        for batch in epoch_batches(train_set, config, &mut rng) {
            let inputs: Vec<&[f64]> = batch
                .iter()
                .map(|&i| train_set[i].features.as_slice())
                .collect();
            let labels: Vec<Label> = batch.iter().map(|&i| train_set[i].label).collect();
            let (loss, grads) =
                gradients(&params, &inputs, &labels, config.margin, config.anchor_mode)?;
            if !loss.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: loss.loss,
                });
            }
            if loss.degenerate {
                continue;
            }
            loss_sum += loss.loss;
            steps += 1;
            mined += loss.triplet_count();
            adam_step(&mut params, &grads, &mut adam, config.learning_rate)?;
        }
        let loss = if steps == 0 {
            0.0
        } else {
            loss_sum / steps as f64
        };
        if !params.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }
        let validation_eer = match validation {
            Some(v) => Some(validation_eer(
                v,
                &params,
                config.template_k,
                validation_seed,
            )?),
            None => None,
        };
        history.push(EpochStats {
            loss,
            mined,
            validation_eer,
        });
    }
    Ok(TrainOutcome { params, history })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub best_lr: f64,
    /// `(learning rate, final validation EER)` in grid order.
    pub per_lr: Vec<(f64, f64)>,
    pub best: TrainOutcome,
}

/// One training run per grid point (shared seed); the lowest final
/// validation EER wins, ties going to the smaller learning rate.
pub fn grid_search_lr(
    train_set: &[Sample],
    validation: &[Sample],
    config: &TrainConfig,
) -> Result<GridSearchResult> {
    if config.lr_grid.is_empty() {
        return Err(Error::Config("lr_grid is empty".into()));
    }
    config.validate()?;
    let runs: Vec<(f64, TrainOutcome)> = config
        .lr_grid
        .par_iter()
        .map(|&lr| {
            let cfg = TrainConfig {
                learning_rate: lr,
                ..config.clone()
            };
            train(train_set, Some(validation), &cfg).map(|o| (lr, o))
        })
        .collect::<Result<_>>()?;

    let per_lr: Vec<(f64, f64)> = runs
        .iter()
        .map(|(lr, o)| (*lr, o.final_validation_eer().unwrap_or(f64::INFINITY)))
        .collect();
    let best_idx = (0..per_lr.len())
        .min_by(|&a, &b| {
            per_lr[a]
                .1
                .total_cmp(&per_lr[b].1)
                .then(per_lr[a].0.total_cmp(&per_lr[b].0))
        })
        .expect("grid is nonempty");
    let (best_lr, best) = runs.into_iter().nth(best_idx).unwrap();
    Ok(GridSearchResult {
        best_lr,
        per_lr,
        best,
    })
}
