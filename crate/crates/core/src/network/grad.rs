//! Batch triplet loss and its exact gradient.
//!
//! The mined triplet set is held fixed within a step. Every mined triplet has
//! a strictly positive hinge (semi-hard by construction, hard fallbacks by at
//! least the margin), so the loss is locally `mean(d_ap + margin - d_an)`.

use super::{ForwardTrace, MlpParams};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::mining::{self, AnchorMode, Triplet};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Mean hinge loss over mined triplets; 0 when none were mined.
    pub loss: f64,
    pub triplets: Vec<Triplet>,
    pub degenerate: bool,
}

impl BatchLoss {
    pub fn triplet_count(&self) -> usize {
        self.triplets.len()
    }
}

fn check_batch(params: &MlpParams, inputs: &[&[f64]], labels: &[Label]) -> Result<()> {
    if inputs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            actual: labels.len(),
        });
    }
    if let Some(x) = inputs.iter().find(|x| x.len() != params.input_dim()) {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            actual: x.len(),
        });
    }
    Ok(())
}

fn mean_loss(triplets: &[Triplet], margin: f64) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    triplets.iter().map(|t| t.loss(margin)).sum::<f64>() / triplets.len() as f64
}

fn mine(
    embeddings: &[Vec<f64>],
    labels: &[Label],
    margin: f64,
    mode: AnchorMode,
) -> Result<BatchLoss> {
    let outcome = mining::mine_semihard(embeddings, labels, margin, mode)?;
    Ok(BatchLoss {
        loss: mean_loss(&outcome.triplets, margin),
        triplets: outcome.triplets,
        degenerate: outcome.degenerate,
    })
}

pub fn batch_loss(
    params: &MlpParams,
    inputs: &[&[f64]],
    labels: &[Label],
    margin: f64,
    mode: AnchorMode,
) -> Result<BatchLoss> {
    check_batch(params, inputs, labels)?;
    let embeddings = inputs
        .iter()
        .map(|x| params.forward(x).map(|e| e.0))
        .collect::<Result<Vec<_>>>()?;
    mine(&embeddings, labels, margin, mode)
}

/// Loss of a fixed triplet set, recomputing distances under `params`.
pub fn frozen_triplet_loss(
    params: &MlpParams,
    inputs: &[&[f64]],
    triplets: &[Triplet],
    margin: f64,
) -> Result<f64> {
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let embeddings = inputs
        .iter()
        .map(|x| params.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = triplets
        .iter()
        .map(|t| {
            let d_ap = embeddings[t.anchor].distance(&embeddings[t.positive]);
            let d_an = embeddings[t.anchor].distance(&embeddings[t.negative]);
            d_ap - d_an + margin
        })
        .sum();
    Ok(total / triplets.len() as f64)
}

/// Adds `scale * d/dx |x - y|` to `grad`; the subgradient at `x == y` is 0.
fn accumulate_distance_grad(grad: &mut [f64], x: &[f64], y: &[f64], dist: f64, scale: f64) {
    if dist == 0.0 {
        return;
    }
    let s = scale / dist;
    for ((g, a), b) in grad.iter_mut().zip(x).zip(y) {
        *g += s * (a - b);
    }
}

fn backprop(
    params: &MlpParams,
    trace: &ForwardTrace,
    grad_embedding: &[f64],
    out: &mut MlpParams,
) -> Result<()> {
    // Through e = z / |z|.
    let e = &trace.embedding;
    let dot: f64 = e.iter().zip(grad_embedding).map(|(a, b)| a * b).sum();
    let mut delta: Vec<f64> = grad_embedding
        .iter()
        .zip(e)
        .map(|(g, ei)| (g - ei * dot) / trace.norm)
        .collect();

    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let input = &trace.activations[l];
        let target = &mut out.layers[l];
        for (j, &dj) in delta.iter().enumerate() {
            if dj == 0.0 {
                continue;
            }
            target.biases[j] += dj;
            let row = &mut target.weights[j * layer.inputs..(j + 1) * layer.inputs];
            for (w, x) in row.iter_mut().zip(input) {
                *w += dj * x;
            }
        }
        if l == 0 {
            break;
        }
        let below = &trace.pre_activations[l - 1];
        let mut next = vec![0.0; layer.inputs];
        for (j, &dj) in delta.iter().enumerate() {
            if dj == 0.0 {
                continue;
            }
            let row = &layer.weights[j * layer.inputs..(j + 1) * layer.inputs];
            for (n, w) in next.iter_mut().zip(row) {
                *n += dj * w;
            }
        }
        for (n, z) in next.iter_mut().zip(below) {
            if *z <= 0.0 {
                *n = 0.0;
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLayer {
                layer: l - 1,
                stage: "backward",
            });
        }
        delta = next;
    }
    Ok(())
}

/// Loss and exact gradient of the batch loss with respect to every parameter.
pub fn gradients(
    params: &MlpParams,
    inputs: &[&[f64]],
    labels: &[Label],
    margin: f64,
    mode: AnchorMode,
) -> Result<(BatchLoss, MlpParams)> {
    check_batch(params, inputs, labels)?;
    let traces = inputs
        .iter()
        .map(|x| params.trace(x))
        .collect::<Result<Vec<_>>>()?;
    let embeddings: Vec<Vec<f64>> = traces.iter().map(|t| t.embedding.clone()).collect();
    let loss = mine(&embeddings, labels, margin, mode)?;

    let mut grads = params.zeros_like();
    if loss.triplets.is_empty() {
        return Ok((loss, grads));
    }
    let dim = params.embedding_dim();
    let mut grad_e = vec![vec![0.0; dim]; inputs.len()];
    let w = 1.0 / loss.triplets.len() as f64;
    for t in &loss.triplets {
        let (a, p, n) = (t.anchor, t.positive, t.negative);
        accumulate_distance_grad(&mut grad_e[a], &embeddings[a], &embeddings[p], t.d_ap, w);
        accumulate_distance_grad(&mut grad_e[p], &embeddings[p], &embeddings[a], t.d_ap, w);
        accumulate_distance_grad(&mut grad_e[a], &embeddings[a], &embeddings[n], t.d_an, -w);
        accumulate_distance_grad(&mut grad_e[n], &embeddings[n], &embeddings[a], t.d_an, -w);
    }
    for (trace, g) in traces.iter().zip(&grad_e) {
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        backprop(params, trace, g, &mut grads)?;
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Layer;
    use crate::rng::rng_from_seed;
    use rand_distr::{Distribution, StandardNormal};

    fn random_batch(seed: u64, b: usize, d: usize) -> (Vec<Vec<f64>>, Vec<Label>) {
        let mut rng = rng_from_seed(seed);
        let xs = (0..b)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let labels = (0..b)
            .map(|i| {
                if i % 2 == 0 {
                    Label::BonaFide
                } else {
                    Label::Attack
                }
            })
            .collect();
        (xs, labels)
    }

    #[test]
    fn identical_embeddings_give_margin_loss_and_zero_gradient() {
        // Zero weights with a constant bias map every input to the same point.
        let layer = Layer {
            inputs: 3,
            outputs: 2,
            weights: vec![0.0; 6],
            biases: vec![1.0, 0.0],
        };
        let net = MlpParams::from_layers(vec![layer]).unwrap();
        let (xs, labels) = random_batch(1, 6, 3);
        let inputs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let (loss, grads) =
            gradients(&net, &inputs, &labels, 0.2, AnchorMode::BothClasses).unwrap();
        assert!((loss.loss - 0.2).abs() < 1e-15);
        assert_eq!(loss.triplet_count(), 6 * 2);
        assert!(grads.values().all(|v| *v == 0.0));
    }

    #[test]
    fn easy_batch_has_zero_loss_and_gradient() {
        // Identity map: bona fide on +x, morphs on -x.
        let layer = Layer {
            inputs: 2,
            outputs: 2,
            weights: vec![1.0, 0.0, 0.0, 1.0],
            biases: vec![0.0, 0.0],
        };
        let net = MlpParams::from_layers(vec![layer]).unwrap();
        let xs = [
            vec![1.0, 0.01],
            vec![1.0, -0.01],
            vec![-1.0, 0.02],
            vec![-1.0, -0.02],
        ];
        let inputs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let labels = [
            Label::BonaFide,
            Label::BonaFide,
            Label::Attack,
            Label::Attack,
        ];
        let (loss, grads) =
            gradients(&net, &inputs, &labels, 0.2, AnchorMode::BothClasses).unwrap();
        assert_eq!(loss.loss, 0.0);
        assert!(loss.triplets.is_empty());
        assert!(grads.values().all(|v| *v == 0.0));
    }

    #[test]
    fn margin_shift_leaves_distance_gradients_unchanged() {
        // One semi-hard triplet under margin m and 2m: loss shifts by m,
        // gradient (driven only by d_ap and d_an) is identical.
        let layer = Layer {
            inputs: 3,
            outputs: 3,
            weights: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            biases: vec![0.0; 3],
        };
        let net = MlpParams::from_layers(vec![layer]).unwrap();
        let xs = [
            vec![0.1f64.cos(), 0.1f64.sin(), 0.0],
            vec![0.1f64.cos(), -0.1f64.sin(), 0.0],
            vec![0.28f64.cos(), 0.0, 0.28f64.sin()],
        ];
        let inputs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let labels = [Label::BonaFide, Label::BonaFide, Label::Attack];
        let (l1, g1) = gradients(&net, &inputs, &labels, 0.2, AnchorMode::BonaFideOnly).unwrap();
        let (l2, g2) = gradients(&net, &inputs, &labels, 0.4, AnchorMode::BonaFideOnly).unwrap();
        assert_eq!(l1.triplets.len(), 2);
        assert_eq!(l2.triplets.len(), 2);
        assert!((l2.loss - l1.loss - 0.2).abs() < 1e-12);
        for (a, b) in g1.values().zip(g2.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn finite_differences_agree() {
        let net = MlpParams::init(&[4, 6, 3], 21).unwrap();
        let (xs, labels) = random_batch(22, 10, 4);
        let inputs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let (loss, grads) =
            gradients(&net, &inputs, &labels, 0.5, AnchorMode::BothClasses).unwrap();
        assert!(!loss.triplets.is_empty());
        let h = 1e-5;
        let analytic = grads.flatten();
        for i in 0..net.num_params() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            *plus.values_mut().nth(i).unwrap() += h;
            *minus.values_mut().nth(i).unwrap() -= h;
            let fp = frozen_triplet_loss(&plus, &inputs, &loss.triplets, 0.5).unwrap();
            let fm = frozen_triplet_loss(&minus, &inputs, &loss.triplets, 0.5).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - analytic[i]).abs();
            assert!(
                err <= 1e-7 || err / fd.abs().max(analytic[i].abs()) < 1e-4,
                "param {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn frozen_loss_matches_batch_loss() {
        let net = MlpParams::init(&[4, 6, 3], 5).unwrap();
        let (xs, labels) = random_batch(6, 12, 4);
        let inputs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let bl = batch_loss(&net, &inputs, &labels, 0.3, AnchorMode::BothClasses).unwrap();
        let frozen = frozen_triplet_loss(&net, &inputs, &bl.triplets, 0.3).unwrap();
        assert!((bl.loss - frozen).abs() < 1e-12);
    }
}
