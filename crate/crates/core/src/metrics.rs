//! ISO/IEC 30107-3 score-level error rates.
//!
//! Scores follow the convention "higher = more attack-like" and a probe is
//! classified as an attack iff `score > threshold`. All rates are decimal
//! fractions in `[0, 1]`; formatting as percentages happens at the edges.
//!
//! Operating points are only ever evaluated on a fixed candidate set: the
//! midpoints between adjacent distinct pooled scores plus one sentinel below
//! the minimum and one above the maximum. No interpolation is performed, so
//! every reported rate is an exact ratio of integer counts.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;

pub const SCORE_HEADER: [&str; 4] = ["probe_id", "label", "species", "score"];
pub const DET_HEADER: [&str; 3] = ["threshold", "apcer", "bpcer"];

/// APCER targets of the two standard operating points.
pub const APCER_TARGET_BPCER10: f64 = 0.10;
pub const APCER_TARGET_BPCER20: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub probe_id: String,
    pub label: Label,
    /// Morph tool name; empty for bona fide.
    pub species: String,
    pub score: f64,
}

impl ScoreRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.score.is_finite() {
            return Err(Error::NonFinite(format!(
                "score of probe {}",
                self.probe_id
            )));
        }
        match (self.label, self.species.is_empty()) {
            (Label::Attack, true) => Err(Error::invalid(format!(
                "attack probe {} has no species",
                self.probe_id
            ))),
            (Label::BonaFide, false) => Err(Error::invalid(format!(
                "bona fide probe {} carries species '{}'",
                self.probe_id, self.species
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeciesMetrics {
    pub eer: f64,
    pub bpcer10: f64,
    pub bpcer20: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub bpcer10: f64,
    pub bpcer20: f64,
    pub per_species: BTreeMap<String, SpeciesMetrics>,
}

/// `1` (attack) iff `score > threshold`.
pub fn classify(score: f64, threshold: f64) -> Result<u8> {
    if !score.is_finite() || !threshold.is_finite() {
        return Err(Error::NonFinite(format!(
            "classify(score={score}, threshold={threshold})"
        )));
    }
    Ok(u8::from(score > threshold))
}

fn ratio(count: usize, total: usize) -> f64 {
    count as f64 / total as f64
}

fn check_finite(scores: &[f64], what: &str) -> Result<()> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} score at index {i}"))),
        None => Ok(()),
    }
}

/// Fraction of bona fide presentations classified as attacks.
pub fn bpcer_at(bona_fide_scores: &[f64], threshold: f64) -> Result<f64> {
    if bona_fide_scores.is_empty() {
        return Err(Error::NoBonaFide);
    }
    let mut flagged = 0;
    for &s in bona_fide_scores {
        flagged += usize::from(classify(s, threshold)?);
    }
    Ok(ratio(flagged, bona_fide_scores.len()))
}

/// Fraction of attack presentations (of one species) classified as bona fide.
pub fn apcer_at(attack_scores: &[f64], threshold: f64) -> Result<f64> {
    if attack_scores.is_empty() {
        return Err(Error::NoAttacks);
    }
    let mut missed = 0;
    for &s in attack_scores {
        missed += 1 - usize::from(classify(s, threshold)?);
    }
    Ok(ratio(missed, attack_scores.len()))
}

fn below(x: f64) -> f64 {
    let s = x - 1.0;
    if s < x {
        s
    } else {
        x - x.abs()
    }
}

fn above(x: f64) -> f64 {
    let s = x + 1.0;
    if s > x {
        s
    } else {
        x + x.abs()
    }
}

/// Sorted candidate thresholds: sentinels around the pooled range plus the
/// midpoint of every adjacent pair of distinct pooled scores.
pub fn candidate_thresholds(bona_fide_scores: &[f64], attack_scores: &[f64]) -> Vec<f64> {
    let mut pooled: Vec<f64> = bona_fide_scores
        .iter()
        .chain(attack_scores)
        .copied()
        .collect();
    if pooled.is_empty() {
        return Vec::new();
    }
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    let mut out = Vec::with_capacity(pooled.len() + 1);
    out.push(below(pooled[0]));
    out.extend(pooled.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(above(pooled[pooled.len() - 1]));
    out
}

/// Both score sets sorted once; rates at any threshold are then two binary
/// searches.
struct SortedScores {
    bona_fide: Vec<f64>,
    attack: Vec<f64>,
}

impl SortedScores {
    fn new(bona_fide_scores: &[f64], attack_scores: &[f64]) -> Result<Self> {
        if bona_fide_scores.is_empty() {
            return Err(Error::NoBonaFide);
        }
        if attack_scores.is_empty() {
            return Err(Error::NoAttacks);
        }
        check_finite(bona_fide_scores, "bona fide")?;
        check_finite(attack_scores, "attack")?;
        let mut bona_fide = bona_fide_scores.to_vec();
        let mut attack = attack_scores.to_vec();
        bona_fide.sort_by(f64::total_cmp);
        attack.sort_by(f64::total_cmp);
        Ok(Self { bona_fide, attack })
    }

    /// (attacks classified bona fide, bona fide classified attack)
    fn counts(&self, threshold: f64) -> (usize, usize) {
        let missed = self.attack.partition_point(|&s| s <= threshold);
        let flagged = self.bona_fide.len() - self.bona_fide.partition_point(|&s| s <= threshold);
        (missed, flagged)
    }

    fn point(&self, threshold: f64) -> DetPoint {
        let (missed, flagged) = self.counts(threshold);
        DetPoint {
            threshold,
            apcer: ratio(missed, self.attack.len()),
            bpcer: ratio(flagged, self.bona_fide.len()),
        }
    }

    /// `|APCER - BPCER|` scaled by `n_attack * n_bona_fide`, exact in integers.
    fn scaled_gap(&self, threshold: f64) -> u128 {
        let (missed, flagged) = self.counts(threshold);
        let a = missed as u128 * self.bona_fide.len() as u128;
        let b = flagged as u128 * self.attack.len() as u128;
        a.abs_diff(b)
    }

    fn candidates(&self) -> Vec<f64> {
        candidate_thresholds(&self.bona_fide, &self.attack)
    }
}

/// Equal error rate and the threshold at which it is attained.
///
/// Returns the candidate threshold minimising `|APCER - BPCER|` (ties go to
/// the smaller threshold) and reports `(APCER + BPCER) / 2` there.
pub fn eer(bona_fide_scores: &[f64], attack_scores: &[f64]) -> Result<(f64, f64)> {
    let sorted = SortedScores::new(bona_fide_scores, attack_scores)?;
    let mut best: Option<(u128, f64)> = None;
    for t in sorted.candidates() {
        let gap = sorted.scaled_gap(t);
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, t));
        }
    }
    let (_, threshold) = best.expect("candidate set is never empty");
    let p = sorted.point(threshold);
    Ok(((p.apcer + p.bpcer) / 2.0, threshold))
}

/// BPCER at the largest candidate threshold whose APCER does not exceed
/// `target_apcer`. If no candidate reaches the target, the candidate with
/// the smallest APCER (then smallest BPCER) is used.
pub fn bpcer_at_apcer(
    bona_fide_scores: &[f64],
    attack_scores: &[f64],
    target_apcer: f64,
) -> Result<f64> {
    if !(target_apcer > 0.0 && target_apcer < 1.0) {
        return Err(Error::invalid(format!(
            "target APCER {target_apcer} outside (0, 1)"
        )));
    }
    let sorted = SortedScores::new(bona_fide_scores, attack_scores)?;
    let points: Vec<DetPoint> = sorted
        .candidates()
        .into_iter()
        .map(|t| sorted.point(t))
        .collect();
    if let Some(p) = points.iter().rev().find(|p| p.apcer <= target_apcer) {
        return Ok(p.bpcer);
    }
    let fallback = points
        .iter()
        .min_by(|a, b| {
            a.apcer
                .total_cmp(&b.apcer)
                .then(a.bpcer.total_cmp(&b.bpcer))
        })
        .expect("candidate set is never empty");
    Ok(fallback.bpcer)
}

/// One point per candidate threshold, ascending.
pub fn det_curve(bona_fide_scores: &[f64], attack_scores: &[f64]) -> Result<Vec<DetPoint>> {
    let sorted = SortedScores::new(bona_fide_scores, attack_scores)?;
    Ok(sorted
        .candidates()
        .into_iter()
        .map(|t| sorted.point(t))
        .collect())
}

pub fn species_metrics(bona_fide_scores: &[f64], attack_scores: &[f64]) -> Result<SpeciesMetrics> {
    Ok(SpeciesMetrics {
        eer: eer(bona_fide_scores, attack_scores)?.0,
        bpcer10: bpcer_at_apcer(bona_fide_scores, attack_scores, APCER_TARGET_BPCER10)?,
        bpcer20: bpcer_at_apcer(bona_fide_scores, attack_scores, APCER_TARGET_BPCER20)?,
    })
}

/// Bona fide scores and attack scores grouped by species.
pub fn split_scores(records: &[ScoreRecord]) -> (Vec<f64>, BTreeMap<String, Vec<f64>>) {
    let mut bona_fide = Vec::new();
    let mut attacks: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        match r.label {
            Label::BonaFide => bona_fide.push(r.score),
            Label::Attack => attacks.entry(r.species.clone()).or_default().push(r.score),
        }
    }
    (bona_fide, attacks)
}

/// Pooled metrics over all attack species plus one block per species.
pub fn evaluate(records: &[ScoreRecord]) -> Result<MetricReport> {
    for r in records {
        r.validate()?;
    }
    let (bona_fide, attacks) = split_scores(records);
    let pooled: Vec<f64> = attacks.values().flatten().copied().collect();
    let (eer_value, eer_threshold) = eer(&bona_fide, &pooled)?;
    let mut per_species = BTreeMap::new();
    for (species, scores) in &attacks {
        per_species.insert(species.clone(), species_metrics(&bona_fide, scores)?);
    }
    Ok(MetricReport {
        eer: eer_value,
        eer_threshold,
        bpcer10: bpcer_at_apcer(&bona_fide, &pooled, APCER_TARGET_BPCER10)?,
        bpcer20: bpcer_at_apcer(&bona_fide, &pooled, APCER_TARGET_BPCER20)?,
        per_species,
    })
}

pub fn write_scores<W: Write>(writer: W, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::invalid(format!("writing scores: {e}"));
    w.write_record(SCORE_HEADER).map_err(to_err)?;
    for r in records {
        w.write_record([
            r.probe_id.as_str(),
            r.label.as_score_token(),
            r.species.as_str(),
            &r.score.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::invalid(format!("writing scores: {e}")))?;
    Ok(())
}

/// Parses a score CSV. `origin` is used only in error messages.
pub fn read_scores<R: Read>(reader: R, origin: &Path) -> Result<Vec<ScoreRecord>> {
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
    if header.iter().collect::<Vec<_>>() != SCORE_HEADER {
        return Err(Error::parse(
            origin,
            1,
            format!("expected header '{}'", SCORE_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(origin, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 4 {
            return Err(Error::parse(
                origin,
                line,
                format!("expected 4 fields, got {}", row.len()),
            ));
        }
        let label: Label = row[1]
            .parse()
            .map_err(|e: String| Error::parse(origin, line, e))?;
        if label == Label::BonaFide && &row[1] != "bonafide" {
            return Err(Error::parse(
                origin,
                line,
                "label must be 'bonafide' or 'attack'",
            ));
        }
        let score: f64 = row[3]
            .trim()
            .parse()
            .map_err(|_| Error::parse(origin, line, format!("bad score '{}'", &row[3])))?;
        let record = ScoreRecord {
            probe_id: row[0].to_string(),
            label,
            species: row[2].to_string(),
            score,
        };
        record
            .validate()
            .map_err(|e| Error::parse(origin, line, e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_det<W: Write>(writer: W, points: &[DetPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::invalid(format!("writing DET curve: {e}"));
    w.write_record(DET_HEADER).map_err(to_err)?;
    for p in points {
        w.write_record([
            p.threshold.to_string(),
            p.apcer.to_string(),
            p.bpcer.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::invalid(format!("writing DET curve: {e}")))?;
    Ok(())
}

/// Key-value rendering of a report with decimal rates.
pub fn report_to_string(report: &MetricReport) -> String {
    toml::to_string(report).expect("metric report is always serialisable")
}

pub fn report_from_str(text: &str) -> Result<MetricReport> {
    toml::from_str(text).map_err(|e| Error::Config(format!("metric report: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn classify_strict_rule() {
        assert_eq!(classify(0.9, 0.5).unwrap(), 1);
        assert_eq!(classify(0.5, 0.5).unwrap(), 0);
        assert_eq!(classify(0.1, 0.5).unwrap(), 0);
        assert!(classify(f64::NAN, 0.5).is_err());
        assert!(classify(0.1, f64::INFINITY).is_err());
    }

    #[test]
    fn bpcer_examples() {
        assert_eq!(bpcer_at(&[0.1, 0.2, 0.9, 0.3], 0.5).unwrap(), 0.25);
        let scores = [0.3, 0.7, 0.2];
        assert_eq!(bpcer_at(&scores, 0.7 + 1.0).unwrap(), 0.0);
        let mut rng = rng_from_seed(1);
        let uniform: Vec<f64> = (0..100)
            .map(|_| rng.random_range(f64::EPSILON..1.0))
            .collect();
        assert_eq!(bpcer_at(&uniform, 0.0).unwrap(), 1.0);
        assert!(matches!(bpcer_at(&[], 0.5), Err(Error::NoBonaFide)));
        assert_eq!(Error::NoBonaFide.to_string(), "no bona fide presentations");
    }

    #[test]
    fn apcer_examples() {
        assert_eq!(apcer_at(&[0.9, 0.8, 0.2, 0.7], 0.5).unwrap(), 0.25);
        assert_eq!(apcer_at(&[0.9, 0.8, 0.2], 0.2 - 1.0).unwrap(), 0.0);
        assert_eq!(apcer_at(&[0.4, 0.4, 0.4], 0.4).unwrap(), 1.0);
        assert!(matches!(apcer_at(&[], 0.5), Err(Error::NoAttacks)));
        assert_eq!(Error::NoAttacks.to_string(), "no attack presentations");
    }

    #[test]
    fn eer_extremes() {
        assert_eq!(eer(&[0.0; 4], &[1.0; 4]).unwrap().0, 0.0);
        assert_eq!(eer(&[1.0, 1.0], &[0.0, 0.0]).unwrap().0, 1.0);
        assert!(eer(&[], &[1.0]).is_err());
        assert!(eer(&[1.0], &[]).is_err());
    }

    #[test]
    fn eer_small_case_matches_hand_sweep() {
        // Candidates: -0.9, .25, .45, .55, .65, .8, 1.9.
        // At 0.55: APCER = 1/3 (0.5), BPCER = 1/3 (0.6). Gap 0, first such.
        let bf = [0.1, 0.4, 0.6];
        let atk = [0.5, 0.7, 0.9];
        let (e, t) = eer(&bf, &atk).unwrap();
        assert!((t - 0.55).abs() < 1e-12);
        assert_eq!(e, 1.0 / 3.0);
    }

    #[test]
    fn bpcer_at_apcer_examples() {
        assert_eq!(bpcer_at_apcer(&[0.1, 0.2], &[0.8, 0.9], 0.05).unwrap(), 0.0);
        assert_eq!(bpcer_at_apcer(&[0.1], &[0.9], 0.10).unwrap(), 0.0);
        assert!(bpcer_at_apcer(&[0.1], &[0.9], 0.0).is_err());
        assert!(bpcer_at_apcer(&[0.1], &[0.9], 1.0).is_err());
    }

    #[test]
    fn det_two_point_example() {
        let det = det_curve(&[0.0], &[1.0]).unwrap();
        let pairs: Vec<(f64, f64)> = det.iter().map(|p| (p.apcer, p.bpcer)).collect();
        assert_eq!(pairs, vec![(0.0, 1.0), (0.0, 0.0), (1.0, 0.0)]);
        assert_eq!(det[0].threshold, -1.0);
        assert_eq!(det[1].threshold, 0.5);
        assert_eq!(det[2].threshold, 2.0);
    }

    #[test]
    fn sentinels_survive_large_magnitudes() {
        let t = candidate_thresholds(&[1e300], &[-1e300]);
        assert!(t[0] < -1e300);
        assert!(t[t.len() - 1] > 1e300);
    }

    #[test]
    fn evaluate_groups_species() {
        let rec = |id: &str, label, species: &str, score| ScoreRecord {
            probe_id: id.into(),
            label,
            species: species.into(),
            score,
        };
        let records = vec![
            rec("b0", Label::BonaFide, "", 0.1),
            rec("b1", Label::BonaFide, "", 0.2),
            rec("m0", Label::Attack, "opencv", 0.9),
            rec("m1", Label::Attack, "webmorph", 0.15),
        ];
        let report = evaluate(&records).unwrap();
        assert_eq!(report.per_species.len(), 2);
        assert_eq!(report.per_species["opencv"].eer, 0.0);
        assert!(report.per_species["webmorph"].eer > 0.0);
        let text = report_to_string(&report);
        assert_eq!(report_from_str(&text).unwrap(), report);
    }

    #[test]
    fn invalid_records_rejected() {
        let bad = ScoreRecord {
            probe_id: "x".into(),
            label: Label::Attack,
            species: String::new(),
            score: 0.3,
        };
        assert!(bad.validate().is_err());
        let bad = ScoreRecord {
            probe_id: "x".into(),
            label: Label::BonaFide,
            species: "opencv".into(),
            score: 0.3,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn score_csv_errors_carry_line_numbers() {
        let text = "probe_id,label,species,score\nb0,bonafide,,0.1\nm0,attack,opencv,zzz\n";
        let err = read_scores(text.as_bytes(), Path::new("s.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = read_scores("b0,bonafide,,0.1\n".as_bytes(), Path::new("s.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = read_scores(
            "probe_id,label,species,score\nb0,morph,,0.1\n".as_bytes(),
            Path::new("s.csv"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    fn scores_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(0u8..40, 1..40),
            prop::collection::vec(0u8..40, 1..40),
        )
            .prop_map(|(a, b)| {
                (
                    a.into_iter().map(|v| f64::from(v) / 10.0).collect(),
                    b.into_iter().map(|v| f64::from(v) / 10.0).collect(),
                )
            })
    }

    proptest! {
        #[test]
        fn rates_are_monotone_and_bounded((bf, atk) in scores_strategy()) {
            let det = det_curve(&bf, &atk).unwrap();
            for w in det.windows(2) {
                prop_assert!(w[0].apcer <= w[1].apcer);
                prop_assert!(w[0].bpcer >= w[1].bpcer);
            }
            for p in &det {
                prop_assert!((0.0..=1.0).contains(&p.apcer));
                prop_assert!((0.0..=1.0).contains(&p.bpcer));
            }
        }

        #[test]
        fn permutation_invariant((bf, atk) in scores_strategy(), seed in any::<u64>()) {
            let mut bf2 = bf.clone();
            let mut atk2 = atk.clone();
            let mut rng = rng_from_seed(seed);
            crate::rng::shuffle(&mut rng, &mut bf2);
            crate::rng::shuffle(&mut rng, &mut atk2);
            prop_assert_eq!(eer(&bf, &atk).unwrap(), eer(&bf2, &atk2).unwrap());
            prop_assert_eq!(det_curve(&bf, &atk).unwrap(), det_curve(&bf2, &atk2).unwrap());
            prop_assert_eq!(
                bpcer_at_apcer(&bf, &atk, 0.05).unwrap(),
                bpcer_at_apcer(&bf2, &atk2, 0.05).unwrap()
            );
        }

        #[test]
        fn separable_sets_have_zero_operating_points(
            bf in prop::collection::vec(0.0f64..1.0, 1..30),
            atk in prop::collection::vec(2.0f64..3.0, 1..30),
            target in 0.001f64..0.999,
        ) {
            prop_assert_eq!(bpcer_at_apcer(&bf, &atk, target).unwrap(), 0.0);
            prop_assert_eq!(eer(&bf, &atk).unwrap().0, 0.0);
        }
    }
}
