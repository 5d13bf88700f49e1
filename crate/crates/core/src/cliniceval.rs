//! Rule-based observation labeling, micro-averaged clinical metrics and
//! Spearman correlation of per-report metrics against clinical accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textproc::{AnalyzedReport, AnalyzedSentence, Lexicon, ObservationKeywords};

/// The evaluated observations in the order used by the bundled lexicon.
pub const OBSERVATIONS: [&str; 5] = ["atelectasis", "cardiomegaly", "consolidation", "edema", "pleural effusion"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Positive,
    Negative,
    NotMentioned,
}

/// One status per observation, aligned with the lexicon's observation list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationStatus {
    pub names: Vec<String>,
    pub statuses: Vec<Status>,
}

impl ObservationStatus {
    pub fn get(&self, name: &str) -> Option<Status> {
        self.names.iter().position(|n| n == name).map(|i| self.statuses[i])
    }
}

fn mentions(sentence: &AnalyzedSentence, obs: &ObservationKeywords) -> bool {
    obs.patterns
        .iter()
        .any(|p| !p.is_empty() && p.iter().all(|w| sentence.tokens.iter().any(|t| t == w)))
}

/// Positive if mentioned in any non-negated sentence, negative if mentioned
/// only in negated sentences, otherwise not mentioned.
pub fn label_observations(report: &AnalyzedReport, lexicon: &Lexicon) -> ObservationStatus {
    let observations = lexicon.observations();
    let statuses = observations
        .iter()
        .map(|obs| {
            let mut status = Status::NotMentioned;
            for s in report.sentences.iter().filter(|s| mentions(s, obs)) {
                if !s.negated {
                    return Status::Positive;
                }
                status = Status::Negative;
            }
            status
        })
        .collect();
    ObservationStatus {
        names: observations.iter().map(|o| o.name.clone()).collect(),
        statuses,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MicroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
    exact: usize,
    cells: usize,
}

impl Counts {
    fn add(&mut self, p: Status, r: Status) {
        let (pp, rp) = (p == Status::Positive, r == Status::Positive);
        self.tp += (pp && rp) as usize;
        self.fp += (pp && !rp) as usize;
        self.fn_ += (!pp && rp) as usize;
        self.exact += (p == r) as usize;
        self.cells += 1;
    }

    fn metrics(&self) -> MicroMetrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        MicroMetrics {
            precision,
            recall,
            f1,
            accuracy: ratio(self.exact, self.cells),
        }
    }
}

fn check_aligned(predicted: &[ObservationStatus], reference: &[ObservationStatus]) -> Result<()> {
    if predicted.len() != reference.len() {
        return Err(Error::Validation(format!(
            "{} predicted vs {} reference reports",
            predicted.len(),
            reference.len()
        )));
    }
    for (i, (p, r)) in predicted.iter().zip(reference).enumerate() {
        if p.names != r.names {
            return Err(Error::Validation(format!("observation lists differ at report {i}")));
        }
    }
    Ok(())
}

/// Micro-averaged metrics with POSITIVE as the positive class; accuracy is
/// the exact three-way status match rate over all cells.
pub fn micro_metrics(predicted: &[ObservationStatus], reference: &[ObservationStatus]) -> Result<MicroMetrics> {
    check_aligned(predicted, reference)?;
    let mut c = Counts::default();
    for (p, r) in predicted.iter().zip(reference) {
        for (a, b) in p.statuses.iter().zip(&r.statuses) {
            c.add(*a, *b);
        }
    }
    Ok(c.metrics())
}

/// The same metrics computed separately for each observation.
pub fn per_observation_metrics(
    predicted: &[ObservationStatus],
    reference: &[ObservationStatus],
) -> Result<BTreeMap<String, MicroMetrics>> {
    check_aligned(predicted, reference)?;
    let Some(first) = reference.first() else {
        return Ok(BTreeMap::new());
    };
    Ok(first
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut c = Counts::default();
            for (p, r) in predicted.iter().zip(reference) {
                c.add(p.statuses[j], r.statuses[j]);
            }
            (name.clone(), c.metrics())
        })
        .collect())
}

/// Fraction of observations whose status matches exactly, for one report.
pub fn report_accuracy(predicted: &ObservationStatus, reference: &ObservationStatus) -> f64 {
    let n = reference.statuses.len();
    if n == 0 {
        return 1.0;
    }
    let hits = predicted
        .statuses
        .iter()
        .zip(&reference.statuses)
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / n as f64
}

/// Fractional ranks (1-based) with ties sharing their average rank.
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of fractional ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Validation(format!("sequence lengths {} and {} differ", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Validation("spearman needs at least 2 points".into()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in spearman input".into()));
    }
    let (rx, ry) = (fractional_ranks(xs), fractional_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("spearman correlation with zero rank variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// ρ between each metric's per-report values and per-report accuracy.
pub fn correlate_rewards(
    metrics: &BTreeMap<String, Vec<f64>>,
    accuracy: &[f64],
) -> Result<BTreeMap<String, f64>> {
    metrics
        .iter()
        .map(|(name, values)| spearman(values, accuracy).map(|rho| (name.clone(), rho)))
        .collect()
}

/// Metric report as written by the `evaluate` and `correlate` commands.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_observation: BTreeMap<String, MicroMetrics>,
    pub micro: MicroMetrics,
    pub correlations: BTreeMap<String, f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::analyze_report;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use Status::*;

    fn label(text: &str) -> ObservationStatus {
        let l = Lexicon::builtin();
        label_observations(&analyze_report(text, &l), &l)
    }

    fn status(statuses: Vec<Status>) -> ObservationStatus {
        ObservationStatus {
            names: OBSERVATIONS.iter().map(|s| s.to_string()).collect(),
            statuses,
        }
    }

    #[test]
    fn lexicon_order_matches_observations() {
        let l = Lexicon::builtin();
        let names: Vec<&str> = l.observations().iter().map(|o| o.name.as_str()).collect();
        assert_eq!(names, OBSERVATIONS);
    }

    #[test]
    fn negated_effusion() {
        let s = label("There is no pleural effusion.");
        assert_eq!(s.statuses, vec![NotMentioned, NotMentioned, NotMentioned, NotMentioned, Negative]);
    }

    #[test]
    fn mild_edema_is_positive() {
        assert_eq!(label("There is mild pulmonary edema.").get("edema"), Some(Positive));
        assert_eq!(label("The heart is mildly enlarged.").get("cardiomegaly"), Some(Positive));
        assert_eq!(
            label("No edema. Mild pulmonary edema is present.").get("edema"),
            Some(Positive)
        );
    }

    #[test]
    fn perfect_and_silent_predictions() {
        let r = vec![status(vec![Positive, Negative, NotMentioned, Positive, NotMentioned])];
        let m = micro_metrics(&r, &r).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
        let silent = vec![status(vec![NotMentioned; 5])];
        let m = micro_metrics(&silent, &r).unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.precision, 0.0);
        assert!(micro_metrics(&silent, &[]).is_err());
    }

    #[test]
    fn spearman_extremes_and_errors() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[2.0, 4.0, 8.0, 16.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(spearman(&x, &[1.0; 4]), Err(Error::Undefined(_))));
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(fractional_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn independent_noise_is_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
        assert!(spearman(&a, &b).unwrap().abs() < 0.1);
    }

    proptest! {
        #[test]
        fn spearman_is_rank_invariant(xs in prop::collection::vec(-50i32..50, 3..30), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-20.0..20.0)).collect();
            let Ok(rho) = spearman(&x, &y) else { return Ok(()) };
            let x2: Vec<f64> = x.iter().map(|v| (v / 10.0).exp()).collect();
            let y2: Vec<f64> = y.iter().map(|v| v * v * v + 3.0).collect();
            prop_assert!((spearman(&x2, &y2).unwrap() - rho).abs() < 1e-12);
        }
    }
}
