//! Online triplet mining over a batch of unit-norm embeddings.

use crate::error::{Error, Result};
use crate::label::Label;

pub const DEFAULT_MARGIN: f64 = 0.2;
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TripletBand {
    Easy,
    SemiHard,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_ap: f64,
    pub d_an: f64,
    pub band: TripletBand,
}

/// Which classes may act as anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    #[default]
    BothClasses,
    BonaFideOnly,
}

impl AnchorMode {
    pub fn allows(self, label: Label) -> bool {
        match self {
            AnchorMode::BothClasses => true,
            AnchorMode::BonaFideOnly => label == Label::BonaFide,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MiningOutcome {
    pub triplets: Vec<Triplet>,
    /// Set when the batch cannot form any triplet: fewer than two samples of
    /// every eligible anchor class, or no sample of the opposite class.
    pub degenerate: bool,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn check_unit_rows(embeddings: &[Vec<f64>]) -> Result<()> {
    for (row, e) in embeddings.iter().enumerate() {
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NotNormalized { row, norm });
        }
    }
    Ok(())
}

/// Symmetric `B x B` matrix of Euclidean distances between unit-norm rows.
pub fn pairwise_distances(embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_unit_rows(embeddings)?;
    let n = embeddings.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        if embeddings[i].len() != embeddings[0].len() {
            return Err(Error::DimensionMismatch {
                expected: embeddings[0].len(),
                actual: embeddings[i].len(),
            });
        }
        for j in (i + 1)..n {
            let v = euclidean(&embeddings[i], &embeddings[j]).min(2.0);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

fn check_triplet_args(d_ap: f64, d_an: f64, margin: f64) -> Result<()> {
    if !(d_ap.is_finite() && d_an.is_finite() && margin.is_finite()) {
        return Err(Error::NonFinite(format!(
            "triplet (d_ap={d_ap}, d_an={d_an}, margin={margin})"
        )));
    }
    if d_ap < 0.0 || d_an < 0.0 {
        return Err(Error::invalid(format!(
            "negative distance (d_ap={d_ap}, d_an={d_an})"
        )));
    }
    if margin <= 0.0 {
        return Err(Error::invalid(format!("margin {margin} must be positive")));
    }
    Ok(())
}

fn band_unchecked(d_ap: f64, d_an: f64, margin: f64) -> TripletBand {
    if d_an <= d_ap {
        TripletBand::Hard
    } else if d_an < d_ap + margin {
        TripletBand::SemiHard
    } else {
        TripletBand::Easy
    }
}

// Written as `(d_ap + margin) - d_an` so that the hinge is active exactly when
// the band test `d_an < d_ap + margin` holds.
fn loss_unchecked(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    let upper = d_ap + margin;
    if d_an < upper {
        upper - d_an
    } else {
        0.0
    }
}

/// `max(d_ap - d_an + margin, 0)`.
pub fn triplet_loss(d_ap: f64, d_an: f64, margin: f64) -> Result<f64> {
    check_triplet_args(d_ap, d_an, margin)?;
    Ok(loss_unchecked(d_ap, d_an, margin))
}

pub fn classify_band(d_ap: f64, d_an: f64, margin: f64) -> Result<TripletBand> {
    check_triplet_args(d_ap, d_an, margin)?;
    Ok(band_unchecked(d_ap, d_an, margin))
}

impl Triplet {
    pub fn loss(&self, margin: f64) -> f64 {
        loss_unchecked(self.d_ap, self.d_an, margin)
    }
}

/// Semi-hard mining over a precomputed distance matrix.
///
/// For every ordered same-class pair `(a, p)` the closest negative inside the
/// band `d_ap < d_an < d_ap + margin` is chosen. Pairs without such a negative
/// fall back to the hard negative with the largest `d_an <= d_ap`; pairs whose
/// negatives are all easy contribute nothing. Ties go to the lowest index.
pub fn mine_from_distances(
    distances: &[Vec<f64>],
    labels: &[Label],
    margin: f64,
    mode: AnchorMode,
) -> Result<MiningOutcome> {
    if distances.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: distances.len(),
        });
    }
    if margin <= 0.0 || !margin.is_finite() {
        return Err(Error::invalid(format!("margin {margin} must be positive")));
    }
    let n = labels.len();
    let count = |l: Label| labels.iter().filter(|&&x| x == l).count();
    let feasible = [Label::BonaFide, Label::Attack]
        .into_iter()
        .any(|l| mode.allows(l) && count(l) >= 2 && count(l.other()) >= 1);
    if !feasible {
        return Ok(MiningOutcome {
            triplets: Vec::new(),
            degenerate: true,
        });
    }

    let mut triplets = Vec::new();
    for a in 0..n {
        if !mode.allows(labels[a]) {
            continue;
        }
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let d_ap = distances[a][p];
            let mut semi: Option<(usize, f64)> = None;
            let mut hard: Option<(usize, f64)> = None;
            for neg in 0..n {
                if labels[neg] == labels[a] {
                    continue;
                }
                let d_an = distances[a][neg];
                match band_unchecked(d_ap, d_an, margin) {
                    TripletBand::SemiHard => {
                        if semi.is_none_or(|(_, d)| d_an < d) {
                            semi = Some((neg, d_an));
                        }
                    }
                    TripletBand::Hard => {
                        if hard.is_none_or(|(_, d)| d_an > d) {
                            hard = Some((neg, d_an));
                        }
                    }
                    TripletBand::Easy => {}
                }
            }
            let chosen = semi
                .map(|c| (c, TripletBand::SemiHard))
                .or(hard.map(|c| (c, TripletBand::Hard)));
            if let Some(((negative, d_an), band)) = chosen {
                triplets.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative,
                    d_ap,
                    d_an,
                    band,
                });
            }
        }
    }
    Ok(MiningOutcome {
        triplets,
        degenerate: false,
    })
}

pub fn mine_semihard(
    embeddings: &[Vec<f64>],
    labels: &[Label],
    margin: f64,
    mode: AnchorMode,
) -> Result<MiningOutcome> {
    let d = pairwise_distances(embeddings)?;
    mine_from_distances(&d, labels, margin, mode)
}
