//! Feed-forward embedding network shared by both Siamese towers.
//!
//! Hidden layers use a rectifier; the output layer is linear and followed by
//! L2 normalisation, so every embedding lies on the unit sphere.

mod adam;
mod checkpoint;
mod grad;
mod train;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
};
pub use grad::{batch_loss, frozen_triplet_loss, gradients, BatchLoss};
pub use train::{grid_search_lr, train, EpochStats, GridSearchResult, TrainConfig, TrainOutcome};

/// Unit-norm output of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn distance(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Dense layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.biases)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

/// Network parameters. Gradients and optimizer moments reuse this type so
/// their shapes mirror the parameters exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layer_dims: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    /// `activations[0]` is the input, `activations[l]` the output of layer `l-1`
    /// after its nonlinearity (the last entry is the raw linear output).
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    pub norm: f64,
    pub embedding: Vec<f64>,
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::invalid(
            "layer_dims needs an input and an output size",
        ));
    }
    if layer_dims.contains(&0) {
        return Err(Error::invalid("layer sizes must be positive"));
    }
    Ok(())
}

impl MlpParams {
    /// Fan-in scaled uniform initialisation: weights from
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, biases from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(layer_dims)?;
        let mut rng = rng_from_seed(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let limit = (6.0 / w[0] as f64).sqrt();
                let mut layer = Layer::zeros(w[0], w[1]);
                for v in &mut layer.weights {
                    *v = rng.random_range(-limit..limit);
                }
                let bias_limit = 1.0 / (w[0] as f64).sqrt();
                for v in &mut layer.biases {
                    *v = rng.random_range(-bias_limit..bias_limit);
                }
                layer
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layer_dims: self.layer_dims.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    /// Builds parameters from explicit layers, checking that they chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        let mut dims = vec![layers[0].inputs];
        for l in &layers {
            if l.inputs != *dims.last().unwrap() {
                return Err(Error::DimensionMismatch {
                    expected: *dims.last().unwrap(),
                    actual: l.inputs,
                });
            }
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::invalid("layer buffers do not match declared shape"));
            }
            dims.push(l.outputs);
        }
        check_dims(&dims)?;
        Ok(Self {
            layer_dims: dims,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// All parameters in layer order, weights before biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layer_dims == other.layer_dims
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub(crate) fn trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut activations = vec![input.to_vec()];
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(activations.last().unwrap());
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer {
                    layer: i,
                    stage: "forward",
                });
            }
            let a = if i == last {
                z.clone()
            } else {
                z.iter().map(|&v| v.max(0.0)).collect()
            };
            pre_activations.push(z);
            activations.push(a);
        }
        let out = activations.last().unwrap();
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NonFiniteLayer {
                layer: last,
                stage: "normalisation",
            });
        }
        let embedding = out.iter().map(|v| v / norm).collect();
        Ok(ForwardTrace {
            activations,
            pre_activations,
            norm,
            embedding,
        })
    }

    /// Embeds one input.
    pub fn forward(&self, input: &[f64]) -> Result<Embedding> {
        Ok(Embedding(self.trace(input)?.embedding))
    }

    pub fn embed_all<'a, I>(&self, inputs: I) -> Result<Vec<Embedding>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        inputs.into_iter().map(|x| self.forward(x)).collect()
    }
}
