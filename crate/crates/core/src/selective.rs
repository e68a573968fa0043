//! The selective-prediction layer: threshold decisions, evaluation metrics
//! and threshold selection for a risk tolerance.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::confidence::{Confidence, VerificationLogits};
use crate::error::{Error, Result};

/// Threshold that no confidence can reach: the always-abstain choice.
pub const ABSTAIN_SENTINEL: f64 = 1.0 + f64::EPSILON;

/// One question about one image, with its gold answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    /// Image path or synthetic world id.
    #[serde(rename = "image")]
    pub image_ref: String,
    pub question: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    #[serde(default, rename = "meta")]
    pub metadata: BTreeMap<String, String>,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        if self.gold_answers.is_empty() {
            return Err(Error::invalid(format!("instance {} has no gold answers", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub answer: String,
    pub confidence: Confidence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<VerificationLogits>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Answered,
    Abstained,
}

/// Why an answer was given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Confidence cleared the threshold.
    Threshold,
    /// Verified through collected evidence.
    Recovered,
    /// Verified from vision-tool evidence alone.
    BaselineTools,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveOutcome {
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_ref: Option<String>,
}

impl SelectiveOutcome {
    pub fn answered(answer: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            decision: Decision::Answered,
            answer: Some(answer.into()),
            provenance: Some(provenance),
            trace_ref: None,
        }
    }

    pub fn abstained() -> Self {
        Self {
            decision: Decision::Abstained,
            answer: None,
            provenance: None,
            trace_ref: None,
        }
    }

    pub fn is_answered(&self) -> bool {
        self.decision == Decision::Answered
    }
}

/// `g(a; γ)`: answer iff confidence ≥ gamma.
pub fn decide(confidence: Confidence, gamma: f64) -> bool {
    confidence.value() >= gamma
}

fn check_lengths(flags: &[bool], accuracies: &[f64]) -> Result<()> {
    if flags.len() != accuracies.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} flags vs {} accuracies",
            flags.len(),
            accuracies.len()
        )));
    }
    Ok(())
}

pub fn coverage(answered: &[bool]) -> Result<f64> {
    if answered.is_empty() {
        return Err(Error::invalid("coverage of an empty set"));
    }
    Ok(answered.iter().filter(|a| **a).count() as f64 / answered.len() as f64)
}

/// Error rate among answered instances; `None` when nothing was answered.
pub fn risk(answered: &[bool], accuracies: &[f64]) -> Result<Option<f64>> {
    check_lengths(answered, accuracies)?;
    let mut errors = 0.0;
    let mut count = 0usize;
    for (g, acc) in answered.iter().zip(accuracies) {
        if *g {
            errors += 1.0 - acc;
            count += 1;
        }
    }
    Ok((count > 0).then(|| errors / count as f64))
}

/// Mean per-instance score: graded accuracy when answered, minus `penalty`
/// for answered instances with accuracy exactly 0, zero for abstentions.
pub fn effective_reliability(answered: &[bool], accuracies: &[f64], penalty: f64) -> Result<f64> {
    check_lengths(answered, accuracies)?;
    if answered.is_empty() {
        return Err(Error::invalid("effective reliability of an empty set"));
    }
    if penalty < 0.0 {
        return Err(Error::invalid("penalty must be non-negative"));
    }
    let total: f64 = answered
        .iter()
        .zip(accuracies)
        .filter(|(g, _)| **g)
        .map(|(_, &acc)| if acc == 0.0 { -penalty } else { acc })
        .sum();
    Ok(total / answered.len() as f64)
}

/// Fraction of fully-correct instances that were answered; `None` when no
/// instance is fully correct.
pub fn selective_recall(answered: &[bool], accuracies: &[f64]) -> Result<Option<f64>> {
    check_lengths(answered, accuracies)?;
    let mut correct = 0usize;
    let mut hit = 0usize;
    for (g, acc) in answered.iter().zip(accuracies) {
        if *acc == 1.0 {
            correct += 1;
            if *g {
                hit += 1;
            }
        }
    }
    Ok((correct > 0).then(|| hit as f64 / correct as f64))
}

/// A threshold together with its coverage and risk on the set it was chosen on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub gamma: f64,
    pub coverage: f64,
    pub risk: Option<f64>,
}

/// One point of a risk-coverage sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub gamma: f64,
    pub coverage: f64,
    pub risk: f64,
}

/// Sorts by confidence descending and emits one point per distinct
/// confidence, answering everything at or above it.
fn sweep(scored: &[(Confidence, f64)]) -> Vec<CurvePoint> {
    let mut order: Vec<(f64, f64)> = scored.iter().map(|(c, a)| (c.value(), *a)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = order.len() as f64;
    let mut points = Vec::new();
    let mut errors = 0.0;
    let mut i = 0;
    while i < order.len() {
        let gamma = order[i].0;
        while i < order.len() && order[i].0 == gamma {
            errors += 1.0 - order[i].1;
            i += 1;
        }
        points.push(CurvePoint {
            gamma,
            coverage: i as f64 / n,
            risk: errors / i as f64,
        });
    }
    points
}

/// `γ@r`: the threshold with maximum coverage whose calibration risk is at
/// most `r`. Candidates are the observed confidences plus
/// [`ABSTAIN_SENTINEL`]; ties go to the smaller threshold.
pub fn select_threshold(calibration: &[(Confidence, f64)], r: f64) -> Result<ThresholdChoice> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid(format!("risk tolerance {r} outside [0, 1]")));
    }
    if calibration.is_empty() {
        return Err(Error::invalid("empty calibration set"));
    }
    let mut best = ThresholdChoice {
        gamma: ABSTAIN_SENTINEL,
        coverage: 0.0,
        risk: None,
    };
    for p in sweep(calibration) {
        if p.risk <= r && (p.coverage > best.coverage || (p.coverage == best.coverage && p.gamma < best.gamma)) {
            best = ThresholdChoice {
                gamma: p.gamma,
                coverage: p.coverage,
                risk: Some(p.risk),
            };
        }
    }
    Ok(best)
}

/// One `(gamma, coverage, risk)` point per distinct confidence, gamma descending.
pub fn risk_coverage_curve(scored: &[(Confidence, f64)]) -> Result<Vec<CurvePoint>> {
    if scored.is_empty() {
        return Err(Error::invalid("empty scored set"));
    }
    Ok(sweep(scored))
}

/// Best coverage a plain threshold reaches without exceeding `target_risk`.
pub fn coverage_at_risk(scored: &[(Confidence, f64)], target_risk: f64) -> Result<f64> {
    Ok(risk_coverage_curve(scored)?
        .iter()
        .filter(|p| p.risk <= target_risk)
        .map(|p| p.coverage)
        .fold(0.0, f64::max))
}

/// One evaluated instance, as far as metrics are concerned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredOutcome {
    pub answered: bool,
    pub accuracy: f64,
    pub provenance: Option<Provenance>,
    /// Initial confidence was below the threshold.
    pub below_threshold: bool,
    pub failed_closed: bool,
}

/// Aggregate metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub coverage: f64,
    /// `None` when nothing was answered.
    pub risk: Option<f64>,
    /// Effective reliability with penalty 1.
    pub effective_reliability: f64,
    pub selective_recall: Option<f64>,
    /// Accuracy ≥ 0.5.
    pub answered_correct: usize,
    pub answered_incorrect: usize,
    /// Includes fail-closed abstentions.
    pub abstained: usize,
    pub failed_closed: usize,
    /// Below the threshold (`D_∅`).
    pub below_threshold: usize,
    /// Answered by the threshold (`D_S`).
    pub answered_by_threshold: usize,
    /// Answered after verification (`D_R`).
    pub recovered: usize,
}

impl MetricsReport {
    pub fn from_outcomes(outcomes: &[ScoredOutcome]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::invalid("no outcomes to summarize"));
        }
        let flags: Vec<bool> = outcomes.iter().map(|o| o.answered).collect();
        let acc: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
        let answered_correct = outcomes.iter().filter(|o| o.answered && o.accuracy >= 0.5).count();
        let answered_incorrect = outcomes.iter().filter(|o| o.answered && o.accuracy < 0.5).count();
        Ok(Self {
            n: outcomes.len(),
            coverage: coverage(&flags)?,
            risk: risk(&flags, &acc)?,
            effective_reliability: effective_reliability(&flags, &acc, 1.0)?,
            selective_recall: selective_recall(&flags, &acc)?,
            answered_correct,
            answered_incorrect,
            abstained: outcomes.len() - answered_correct - answered_incorrect,
            failed_closed: outcomes.iter().filter(|o| o.failed_closed).count(),
            below_threshold: outcomes.iter().filter(|o| o.below_threshold).count(),
            answered_by_threshold: outcomes
                .iter()
                .filter(|o| o.answered && o.provenance == Some(Provenance::Threshold))
                .count(),
            recovered: outcomes
                .iter()
                .filter(|o| {
                    o.answered
                        && matches!(o.provenance, Some(Provenance::Recovered | Provenance::BaselineTools))
                })
                .count(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn c(v: f64) -> Confidence {
        Confidence::new(v).unwrap()
    }

    const FLAGS: [bool; 4] = [true, true, true, false];
    const ACC: [f64; 4] = [1.0, 0.0, 1.0, 1.0];

    #[test]
    fn decide_boundary() {
        assert!(decide(c(0.8), 0.8));
        assert!(!decide(c(0.79), 0.8));
        assert!(!decide(c(1.0), ABSTAIN_SENTINEL));
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage(&[true, true, false, false]).unwrap(), 0.5);
        assert_eq!(coverage(&[false; 3]).unwrap(), 0.0);
        assert!(coverage(&[]).is_err());
        // 21.9% of 1,075 rounds to 235 answered
        let flags: Vec<bool> = (0..1075).map(|i| i < 235).collect();
        assert!((coverage(&flags).unwrap() - 0.219).abs() < 0.0005);
    }

    #[test]
    fn risk_examples() {
        assert!((risk(&FLAGS, &ACC).unwrap().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(risk(&[true, true], &[1.0, 1.0]).unwrap(), Some(0.0));
        assert_eq!(risk(&[false, false], &[1.0, 0.0]).unwrap(), None);
        assert!(risk(&[true], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn effective_reliability_examples() {
        assert!((effective_reliability(&FLAGS, &ACC, 1.0).unwrap() - 0.25).abs() < 1e-15);
        let cov = coverage(&FLAGS).unwrap();
        let r = risk(&FLAGS, &ACC).unwrap().unwrap();
        assert_eq!(effective_reliability(&FLAGS, &ACC, 0.0).unwrap(), cov * (1.0 - r));
        // reported calibrated BLIP2 vanilla row at 20%: C=21.9, R=11.9, Φ1=16.8
        let phi: f64 = 0.219 * (1.0 - 2.0 * 0.119);
        assert!((phi - 0.1669).abs() < 1e-4);
        assert!((phi * 100.0 - 16.8).abs() <= 0.6);
        assert!(effective_reliability(&FLAGS, &ACC[..3], 1.0).is_err());
    }

    #[test]
    fn selective_recall_examples() {
        assert!((selective_recall(&FLAGS, &ACC).unwrap().unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(selective_recall(&[true, false], &[1.0, 0.0]).unwrap(), Some(1.0));
        assert_eq!(selective_recall(&[true, false], &[0.0, 0.5]).unwrap(), None);
    }

    fn scored(confs: &[f64], acc: &[f64]) -> Vec<(Confidence, f64)> {
        confs.iter().zip(acc).map(|(&x, &a)| (c(x), a)).collect()
    }

    /// Evaluates every candidate threshold directly from the definitions.
    fn brute_force(data: &[(Confidence, f64)], r: f64) -> ThresholdChoice {
        let mut candidates: Vec<f64> = data.iter().map(|(x, _)| x.value()).collect();
        candidates.push(ABSTAIN_SENTINEL);
        let mut best: Option<ThresholdChoice> = None;
        for &g in &candidates {
            let flags: Vec<bool> = data.iter().map(|(x, _)| decide(*x, g)).collect();
            let acc: Vec<f64> = data.iter().map(|(_, a)| *a).collect();
            let cov = coverage(&flags).unwrap();
            let rk = risk(&flags, &acc).unwrap();
            let feasible = rk.is_none_or(|v| v <= r);
            if !feasible {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => cov > b.coverage || (cov == b.coverage && g < b.gamma),
            };
            if better {
                best = Some(ThresholdChoice { gamma: g, coverage: cov, risk: rk });
            }
        }
        best.unwrap()
    }

    #[test]
    fn select_threshold_examples() {
        let data = scored(&[0.9, 0.8, 0.7, 0.6], &[1.0, 1.0, 0.0, 1.0]);
        let t = select_threshold(&data, 0.0).unwrap();
        assert_eq!((t.gamma, t.coverage, t.risk), (0.8, 0.5, Some(0.0)));
        assert_eq!(t, brute_force(&data, 0.0));
        let t = select_threshold(&data, 0.34).unwrap();
        assert_eq!((t.gamma, t.coverage, t.risk), (0.6, 1.0, Some(0.25)));
        assert_eq!(t, brute_force(&data, 0.34));

        let wrong = scored(&[0.9, 0.5, 0.3], &[0.0, 0.0, 0.0]);
        let t = select_threshold(&wrong, 0.1).unwrap();
        assert_eq!(t.gamma, ABSTAIN_SENTINEL);
        assert_eq!(t.coverage, 0.0);
        assert_eq!(t.risk, None);

        assert!(select_threshold(&data, 1.5).is_err());
        assert!(select_threshold(&[], 0.1).is_err());
    }

    #[test]
    fn full_tolerance_picks_minimum_confidence() {
        let data = scored(&[0.9, 0.2, 0.4], &[0.0, 1.0, 0.0]);
        assert_eq!(select_threshold(&data, 1.0).unwrap().gamma, 0.2);
    }

    #[test]
    fn curve_examples() {
        let one = risk_coverage_curve(&scored(&[0.7], &[1.0])).unwrap();
        assert_eq!(one, vec![CurvePoint { gamma: 0.7, coverage: 1.0, risk: 0.0 }]);
        let data = scored(&[0.9, 0.5], &[0.0, 1.0]);
        let pts = risk_coverage_curve(&data).unwrap();
        assert_eq!(
            pts,
            vec![
                CurvePoint { gamma: 0.9, coverage: 0.5, risk: 1.0 },
                CurvePoint { gamma: 0.5, coverage: 1.0, risk: 0.5 },
            ]
        );
        assert_eq!(coverage_at_risk(&data, 0.5).unwrap(), 1.0);
        assert_eq!(coverage_at_risk(&data, 1.0).unwrap(), 1.0);
        let wrong = scored(&[0.9, 0.5], &[0.0, 0.0]);
        assert_eq!(coverage_at_risk(&wrong, 0.5).unwrap(), 0.0);
        assert!(risk_coverage_curve(&[]).is_err());
    }

    #[test]
    fn metrics_report_counts() {
        let o = |answered, accuracy, provenance, below| ScoredOutcome {
            answered,
            accuracy,
            provenance,
            below_threshold: below,
            failed_closed: false,
        };
        let outcomes = [
            o(true, 1.0, Some(Provenance::Threshold), false),
            o(true, 0.0, Some(Provenance::Recovered), true),
            o(true, 1.0, Some(Provenance::Recovered), true),
            o(false, 1.0, None, true),
        ];
        let m = MetricsReport::from_outcomes(&outcomes).unwrap();
        assert_eq!(m.n, 4);
        assert_eq!(m.answered_correct + m.answered_incorrect + m.abstained, 4);
        assert_eq!(m.coverage, 0.75);
        assert_eq!(m.below_threshold, 3);
        assert_eq!(m.answered_by_threshold, 1);
        assert_eq!(m.recovered, 2);
        assert!((m.effective_reliability - 0.25).abs() < 1e-15);
    }

    fn data_strategy() -> impl Strategy<Value = Vec<(Confidence, f64)>> {
        proptest::collection::vec(
            (0u32..=20, any::<bool>()).prop_map(|(k, ok)| (c(k as f64 / 20.0), if ok { 1.0 } else { 0.0 })),
            1..300,
        )
    }

    proptest! {
        #[test]
        fn phi1_identity_on_binary(flags_acc in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
            let flags: Vec<bool> = flags_acc.iter().map(|p| p.0).collect();
            let acc: Vec<f64> = flags_acc.iter().map(|p| if p.1 { 1.0 } else { 0.0 }).collect();
            let phi = effective_reliability(&flags, &acc, 1.0).unwrap();
            let cov = coverage(&flags).unwrap();
            let expected = match risk(&flags, &acc).unwrap() { Some(r) => cov * (1.0 - 2.0 * r), None => 0.0 };
            prop_assert!((phi - expected).abs() < 1e-12);
        }

        #[test]
        fn selection_matches_brute_force_and_respects_r(data in data_strategy(), r in 0.0f64..=1.0) {
            let t = select_threshold(&data, r).unwrap();
            prop_assert_eq!(t, brute_force(&data, r));
            if let Some(rk) = t.risk { prop_assert!(rk <= r); }
        }

        #[test]
        fn relaxing_r_never_lowers_coverage(data in data_strategy(), r1 in 0.0f64..=1.0, r2 in 0.0f64..=1.0) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            prop_assert!(select_threshold(&data, hi).unwrap().coverage >= select_threshold(&data, lo).unwrap().coverage);
        }

        #[test]
        fn decide_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, g in 0.0f64..=1.01) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(!decide(c(lo), g) || decide(c(hi), g));
        }

        #[test]
        fn curve_is_ordered(data in data_strategy()) {
            let pts = risk_coverage_curve(&data).unwrap();
            for w in pts.windows(2) {
                prop_assert!(w[0].gamma > w[1].gamma);
                prop_assert!(w[0].coverage <= w[1].coverage);
            }
            prop_assert_eq!(pts.last().unwrap().coverage, 1.0);
        }
    }
}
