//! Siamese inference against a fixed bona fide reference template.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::metrics::{self, ScoreRecord};
use crate::network::{Embedding, MlpParams};
use crate::rng::{rng_from_seed, sample_without_replacement};
use crate::synth::Sample;

pub const DEFAULT_TEMPLATE_K: usize = 4;

/// How distances to the `k` references are combined into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "min" => Ok(Aggregation::Min),
            other => Err(format!(
                "unknown aggregation '{other}' (expected mean or min)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub reference_embeddings: Vec<Embedding>,
    pub source_ids: Vec<String>,
    pub seed: u64,
}

impl Template {
    pub fn k(&self) -> usize {
        self.reference_embeddings.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreOptions {
    pub aggregation: Aggregation,
    pub exclude_template_sources: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Mean,
            exclude_template_sources: true,
        }
    }
}

/// Embeds `k` bona fide samples drawn uniformly without replacement.
pub fn build_template(
    bona_fide: &[&Sample],
    params: &MlpParams,
    k: usize,
    seed: u64,
) -> Result<Template> {
    if k == 0 {
        return Err(Error::invalid("template size must be at least 1"));
    }
    if let Some(s) = bona_fide.iter().find(|s| !s.is_bona_fide()) {
        return Err(Error::invalid(format!(
            "template source {} is not bona fide",
            s.sample_id
        )));
    }
    if bona_fide.len() < k {
        return Err(Error::invalid(format!(
            "template needs {k} bona fide samples, only {} available",
            bona_fide.len()
        )));
    }
    let picks = sample_without_replacement(&mut rng_from_seed(seed), bona_fide.len(), k);
    let mut reference_embeddings = Vec::with_capacity(k);
    let mut source_ids = Vec::with_capacity(k);
    for i in picks {
        reference_embeddings.push(params.forward(&bona_fide[i].features)?);
        source_ids.push(bona_fide[i].sample_id.clone());
    }
    Ok(Template {
        reference_embeddings,
        source_ids,
        seed,
    })
}

/// Distance-based morph score; higher means more attack-like.
pub fn morph_score(template: &Template, probe: &Embedding, aggregation: Aggregation) -> f64 {
    let distances = template
        .reference_embeddings
        .iter()
        .map(|r| r.distance(probe));
    match aggregation {
        Aggregation::Mean => distances.sum::<f64>() / template.k() as f64,
        Aggregation::Min => distances.fold(f64::INFINITY, f64::min),
    }
}

pub fn score_dataset(
    samples: &[Sample],
    params: &MlpParams,
    template: &Template,
    options: ScoreOptions,
) -> Result<Vec<ScoreRecord>> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let excluded: BTreeSet<&str> = if options.exclude_template_sources {
        template.source_ids.iter().map(String::as_str).collect()
    } else {
        BTreeSet::new()
    };
    samples
        .iter()
        .filter(|s| !excluded.contains(s.sample_id.as_str()))
        .map(|s| {
            let e = params.forward(&s.features)?;
            Ok(ScoreRecord {
                probe_id: s.sample_id.clone(),
                label: s.label,
                species: s.species.clone(),
                score: morph_score(template, &e, options.aggregation),
            })
        })
        .collect()
}

/// Template from the bona fide part of `samples`, then scores of the rest.
pub fn score_with_own_template(
    samples: &[Sample],
    params: &MlpParams,
    k: usize,
    seed: u64,
    options: ScoreOptions,
) -> Result<(Template, Vec<ScoreRecord>)> {
    let bona_fide: Vec<&Sample> = samples.iter().filter(|s| s.is_bona_fide()).collect();
    let template = build_template(&bona_fide, params, k, seed)?;
    let records = score_dataset(samples, params, &template, options)?;
    Ok((template, records))
}

/// Pooled EER of `samples` scored against a template drawn from their own
/// bona fide samples (template sources excluded).
pub fn validation_eer(samples: &[Sample], params: &MlpParams, k: usize, seed: u64) -> Result<f64> {
    let (_, records) = score_with_own_template(samples, params, k, seed, ScoreOptions::default())?;
    let (bona_fide, attacks): (Vec<&ScoreRecord>, Vec<&ScoreRecord>) =
        records.iter().partition(|r| r.label == Label::BonaFide);
    let bf: Vec<f64> = bona_fide.iter().map(|r| r.score).collect();
    let atk: Vec<f64> = attacks.iter().map(|r| r.score).collect();
    Ok(metrics::eer(&bf, &atk)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Layer;
    use crate::rng::rng_from_seed;
    use crate::synth::{make_dataset, GenerationSpec};
    use rand::Rng;

    fn identity_net(dim: usize) -> MlpParams {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        MlpParams::from_layers(vec![Layer {
            inputs: dim,
            outputs: dim,
            weights,
            biases: vec![0.0; dim],
        }])
        .unwrap()
    }

    fn sample(id: &str, label: Label, features: Vec<f64>) -> Sample {
        let attack = label == Label::Attack;
        Sample {
            sample_id: id.into(),
            features,
            label,
            species: if attack {
                "opencv".into()
            } else {
                String::new()
            },
            parent_ids: if attack {
                vec!["p".into(), "q".into()]
            } else {
                vec![format!("{id}_identity")]
            },
            dataset_tag: "t".into(),
        }
    }

    #[test]
    fn singleton_template() {
        let net = identity_net(2);
        let s = sample("only", Label::BonaFide, vec![1.0, 0.0]);
        let t = build_template(&[&s], &net, 1, 9).unwrap();
        assert_eq!(t.source_ids, vec!["only".to_string()]);
        assert_eq!(
            morph_score(&t, &net.forward(&[3.0, 0.0]).unwrap(), Aggregation::Mean),
            0.0
        );
        assert_eq!(
            morph_score(&t, &net.forward(&[-1.0, 0.0]).unwrap(), Aggregation::Mean),
            2.0
        );
        assert!(build_template(&[&s], &net, 2, 9).is_err());
        let m = sample("m", Label::Attack, vec![1.0, 0.0]);
        assert!(build_template(&[&m], &net, 1, 9).is_err());
    }

    #[test]
    fn template_ids_match_sampler_oracle() {
        let spec = GenerationSpec {
            identities: 102,
            bonafide_per_identity: 2,
            tools: vec![],
            morphs_per_tool: 0,
            ..GenerationSpec::desk_default("frll", 1)
        };
        let ds = make_dataset(&spec).unwrap();
        let pool: Vec<&Sample> = ds.samples.iter().collect();
        let net = MlpParams::init(&[16, 8], 0).unwrap();
        let t = build_template(&pool, &net, 4, 3).unwrap();
        assert_eq!(t, build_template(&pool, &net, 4, 3).unwrap());

        // Partial Fisher-Yates written out independently.
        let mut rng = rng_from_seed(3);
        let mut idx: Vec<usize> = (0..204).collect();
        let mut expected = Vec::new();
        for i in 0..4 {
            let j = rng.random_range(i..204);
            idx.swap(i, j);
            expected.push(pool[idx[i]].sample_id.clone());
        }
        assert_eq!(t.source_ids, expected);
    }

    #[test]
    fn mean_score_is_mean_of_distances_and_order_free() {
        let net = MlpParams::init(&[3, 5, 4], 8).unwrap();
        let refs: Vec<Sample> = (0..4)
            .map(|i| {
                sample(
                    &format!("r{i}"),
                    Label::BonaFide,
                    vec![i as f64, 1.0, -0.5 * i as f64],
                )
            })
            .collect();
        let pool: Vec<&Sample> = refs.iter().collect();
        let t = build_template(&pool, &net, 4, 1).unwrap();
        let probe = net.forward(&[0.3, -2.0, 1.0]).unwrap();
        let manual: f64 = t
            .reference_embeddings
            .iter()
            .map(|r| {
                r.0.iter()
                    .zip(&probe.0)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / 4.0;
        let score = morph_score(&t, &probe, Aggregation::Mean);
        assert!((score - manual).abs() < 1e-15);
        let mut reversed = t.clone();
        reversed.reference_embeddings.reverse();
        assert!((morph_score(&reversed, &probe, Aggregation::Mean) - score).abs() < 1e-15);
        assert!(morph_score(&t, &probe, Aggregation::Min) <= score);
        assert!((0.0..=2.0).contains(&score));
    }

    #[test]
    fn template_sources_excluded_and_labels_passed_through() {
        let net = identity_net(2);
        let samples: Vec<Sample> = (0..6)
            .map(|i| sample(&format!("b{i}"), Label::BonaFide, vec![1.0, 0.1 * i as f64]))
            .collect();
        let (t, records) =
            score_with_own_template(&samples, &net, 2, 5, ScoreOptions::default()).unwrap();
        assert_eq!(records.len(), 4);
        assert!(records.iter().all(|r| !t.source_ids.contains(&r.probe_id)));
        assert!(records
            .iter()
            .all(|r| r.label == Label::BonaFide && r.species.is_empty()));
        let keep = ScoreOptions {
            exclude_template_sources: false,
            ..ScoreOptions::default()
        };
        assert_eq!(score_dataset(&samples, &net, &t, keep).unwrap().len(), 6);
    }

    #[test]
    fn collapsed_bona_fide_cluster_is_separable() {
        // Bona fide all map to +x, morphs to a distant direction.
        let net = identity_net(2);
        let mut samples: Vec<Sample> = (0..5)
            .map(|i| sample(&format!("b{i}"), Label::BonaFide, vec![1.0 + i as f64, 0.0]))
            .collect();
        samples.extend(
            (0..5).map(|i| sample(&format!("m{i}"), Label::Attack, vec![-0.2 * i as f64, 1.0])),
        );
        let (_, records) =
            score_with_own_template(&samples, &net, 2, 0, ScoreOptions::default()).unwrap();
        let max_bf = records
            .iter()
            .filter(|r| r.label == Label::BonaFide)
            .map(|r| r.score)
            .fold(f64::MIN, f64::max);
        let min_atk = records
            .iter()
            .filter(|r| r.label == Label::Attack)
            .map(|r| r.score)
            .fold(f64::MAX, f64::min);
        assert!(min_atk > max_bf);
        assert_eq!(validation_eer(&samples, &net, 2, 0).unwrap(), 0.0);
    }
}
