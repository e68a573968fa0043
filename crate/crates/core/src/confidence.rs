//! Confidence estimation and calibration.
//!
//! The primary confidence signal is self-prompting: after answering, the model
//! is asked whether its answer is correct and the next-token scores of `yes`
//! and `no` are normalized into a probability. Those two raw scores are also
//! the features of a Platt-scaling model fitted against observed correctness.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_sigmoid, sigmoid};

/// Unnormalized log-scores of the `yes` and `no` tokens after a
/// verification prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationLogits {
    pub logit_yes: f64,
    pub logit_no: f64,
}

impl VerificationLogits {
    pub fn new(logit_yes: f64, logit_no: f64) -> Result<Self> {
        let logits = Self {
            logit_yes,
            logit_no,
        };
        logits.check()?;
        Ok(logits)
    }

    fn check(&self) -> Result<()> {
        if self.logit_yes.is_finite() && self.logit_no.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "non-finite verification logits ({}, {})",
                self.logit_yes, self.logit_no
            )))
        }
    }
}

/// A probability in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Confidence(f64);

impl Confidence {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::invalid(format!("confidence {value} outside [0, 1]")))
        }
    }

    /// Clamps into `[0, 1]`; NaN becomes 0.
    pub fn saturating(value: f64) -> Self {
        if value.is_nan() {
            Self(0.0)
        } else {
            Self(value.clamp(0.0, 1.0))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Confidence {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Confidence> for f64 {
    fn from(c: Confidence) -> f64 {
        c.0
    }
}

/// `P(yes) / (P(yes) + P(no))`, computed after subtracting the larger logit.
pub fn self_prompt_confidence(logits: &VerificationLogits) -> Result<Confidence> {
    logits.check()?;
    // sigmoid of the difference is the max-subtracted two-way softmax
    Ok(Confidence::saturating(sigmoid(
        logits.logit_yes - logits.logit_no,
    )))
}

/// How to collapse per-token answer probabilities into one confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenAggregation {
    Product,
    Mean,
    First,
}

pub fn token_seq_confidence(token_probs: &[f64], mode: TokenAggregation) -> Result<Confidence> {
    if token_probs.is_empty() {
        return Err(Error::invalid("empty token probability list"));
    }
    if let Some(bad) = token_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("token probability {bad} outside [0, 1]")));
    }
    let value = match mode {
        TokenAggregation::Product => token_probs.iter().product(),
        TokenAggregation::Mean => token_probs.iter().sum::<f64>() / token_probs.len() as f64,
        TokenAggregation::First => token_probs[0],
    };
    Confidence::new(value)
}

/// Logistic model over `(logit_yes, logit_no)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattModel {
    pub weight_yes: f64,
    pub weight_no: f64,
    pub bias: f64,
}

impl PlattModel {
    /// The model that reproduces uncalibrated self-prompt confidence.
    pub const IDENTITY: PlattModel = PlattModel {
        weight_yes: 1.0,
        weight_no: -1.0,
        bias: 0.0,
    };

    pub fn linear_score(&self, logits: &VerificationLogits) -> f64 {
        self.weight_yes * logits.logit_yes + self.weight_no * logits.logit_no + self.bias
    }

    pub fn apply(&self, logits: &VerificationLogits) -> Result<Confidence> {
        apply_platt(self, logits)
    }

    fn is_finite(&self) -> bool {
        self.weight_yes.is_finite() && self.weight_no.is_finite() && self.bias.is_finite()
    }
}

pub const PLATT_L2_PENALTY: f64 = 1e-6;
pub const PLATT_TOLERANCE: f64 = 1e-8;
pub const PLATT_MAX_ITERATIONS: usize = 200;

pub fn apply_platt(model: &PlattModel, logits: &VerificationLogits) -> Result<Confidence> {
    logits.check()?;
    if !model.is_finite() {
        return Err(Error::invalid("non-finite Platt coefficients"));
    }
    Ok(Confidence::saturating(sigmoid(model.linear_score(logits))))
}

/// Penalized negative log-likelihood of `theta = [w_yes, w_no, bias]`.
fn penalized_nll(theta: &[f64; 3], samples: &[(VerificationLogits, bool)]) -> f64 {
    let mut nll = 0.0;
    for (l, y) in samples {
        let z = theta[0] * l.logit_yes + theta[1] * l.logit_no + theta[2];
        nll -= if *y { log_sigmoid(z) } else { log_sigmoid(-z) };
    }
    nll + 0.5 * PLATT_L2_PENALTY * (theta[0] * theta[0] + theta[1] * theta[1])
}

/// Fits the two-feature logistic model by damped Newton iteration.
///
/// Starts from [`PlattModel::IDENTITY`] and only accepts steps that lower the
/// penalized objective, so the result is never worse than the uncalibrated
/// confidence on the fitted samples (up to the penalty term).
pub fn fit_platt(samples: &[(VerificationLogits, bool)]) -> Result<PlattModel> {
    if samples.len() < 2 {
        return Err(Error::invalid("Platt fitting needs at least 2 samples"));
    }
    for (l, _) in samples {
        l.check()?;
    }
    if !samples.iter().any(|(_, y)| *y) {
        return Err(Error::DegenerateData { missing: "correct" });
    }
    if !samples.iter().any(|(_, y)| !*y) {
        return Err(Error::DegenerateData {
            missing: "incorrect",
        });
    }

    let mut theta = [
        PlattModel::IDENTITY.weight_yes,
        PlattModel::IDENTITY.weight_no,
        PlattModel::IDENTITY.bias,
    ];
    let mut objective = penalized_nll(&theta, samples);

    for _ in 0..PLATT_MAX_ITERATIONS {
        let mut grad = [0.0; 3];
        let mut hess = [[0.0; 3]; 3];
        for (l, y) in samples {
            let x = [l.logit_yes, l.logit_no, 1.0];
            let z = theta[0] * x[0] + theta[1] * x[1] + theta[2];
            let p = sigmoid(z);
            let r = p - if *y { 1.0 } else { 0.0 };
            let w = p * (1.0 - p);
            for i in 0..3 {
                grad[i] += r * x[i];
                for j in 0..3 {
                    hess[i][j] += w * x[i] * x[j];
                }
            }
        }
        for i in 0..2 {
            grad[i] += PLATT_L2_PENALTY * theta[i];
            hess[i][i] += PLATT_L2_PENALTY;
        }

        let direction = solve3(hess, grad).unwrap_or(grad);
        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-10 {
            let candidate = [
                theta[0] - step * direction[0],
                theta[1] - step * direction[1],
                theta[2] - step * direction[2],
            ];
            let value = penalized_nll(&candidate, samples);
            if value.is_finite() && value <= objective {
                accepted = Some((candidate, value));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, value)) = accepted else {
            break;
        };
        let moved = (0..3)
            .map(|i| (candidate[i] - theta[i]).abs())
            .fold(0.0, f64::max);
        theta = candidate;
        objective = value;
        if moved < PLATT_TOLERANCE {
            break;
        }
    }

    let model = PlattModel {
        weight_yes: theta[0],
        weight_no: theta[1],
        bias: theta[2],
    };
    if !model.is_finite() {
        return Err(Error::invalid("Platt fit diverged"));
    }
    Ok(model)
}

/// Gaussian elimination with partial pivoting; `None` when singular.
#[allow(clippy::needless_range_loop)]
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for k in row + 1..3 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Mean log-likelihood of binary outcomes under the given probabilities.
pub fn mean_log_likelihood(scored: &[(f64, bool)]) -> f64 {
    let eps = 1e-15;
    let total: f64 = scored
        .iter()
        .map(|&(p, y)| {
            let p = p.clamp(eps, 1.0 - eps);
            if y {
                libm::log(p)
            } else {
                libm::log(1.0 - p)
            }
        })
        .sum();
    total / scored.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub low: f64,
    pub high: f64,
    /// Zero when the bin is empty.
    pub mean_confidence: f64,
    /// Zero when the bin is empty.
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationReport {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn occupied(&self) -> impl Iterator<Item = &CalibrationBin> {
        self.bins.iter().filter(|b| b.count > 0)
    }
}

pub const DEFAULT_NUM_BINS: usize = 10;

/// Equal-width binned expected calibration error.
pub fn calibration_report(scored: &[(Confidence, bool)], num_bins: usize) -> Result<CalibrationReport> {
    if num_bins == 0 {
        return Err(Error::invalid("num_bins must be at least 1"));
    }
    if scored.is_empty() {
        return Err(Error::invalid("no scored samples"));
    }
    let mut conf_sum = alloc::vec![0.0; num_bins];
    let mut correct = alloc::vec![0usize; num_bins];
    let mut count = alloc::vec![0usize; num_bins];
    for (c, y) in scored {
        let bin = ((c.value() * num_bins as f64) as usize).min(num_bins - 1);
        conf_sum[bin] += c.value();
        correct[bin] += usize::from(*y);
        count[bin] += 1;
    }
    let n = scored.len() as f64;
    let mut ece = 0.0;
    let mut bins = Vec::with_capacity(num_bins);
    for b in 0..num_bins {
        let (mean_confidence, accuracy) = if count[b] > 0 {
            let k = count[b] as f64;
            (conf_sum[b] / k, correct[b] as f64 / k)
        } else {
            (0.0, 0.0)
        };
        if count[b] > 0 {
            ece += (count[b] as f64 / n) * (accuracy - mean_confidence).abs();
        }
        bins.push(CalibrationBin {
            low: b as f64 / num_bins as f64,
            high: (b + 1) as f64 / num_bins as f64,
            mean_confidence,
            accuracy,
            count: count[b],
        });
    }
    Ok(CalibrationReport {
        ece: ece.clamp(0.0, 1.0),
        bins,
    })
}

/// Which signal turns a model's raw reply into a confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConfidenceEstimator {
    SelfPrompt,
    Platt { model: PlattModel },
    TokenSequence { mode: TokenAggregation },
}

impl ConfidenceEstimator {
    pub fn estimate(
        &self,
        logits: Option<&VerificationLogits>,
        token_probs: Option<&[f64]>,
    ) -> Result<Confidence> {
        match self {
            ConfidenceEstimator::SelfPrompt => self_prompt_confidence(
                logits.ok_or_else(|| Error::invalid("self-prompt confidence needs yes/no logits"))?,
            ),
            ConfidenceEstimator::Platt { model } => apply_platt(
                model,
                logits.ok_or_else(|| Error::invalid("Platt confidence needs yes/no logits"))?,
            ),
            ConfidenceEstimator::TokenSequence { mode } => token_seq_confidence(
                token_probs.ok_or_else(|| Error::invalid("token confidence needs token probabilities"))?,
                *mode,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn logits(y: f64, n: f64) -> VerificationLogits {
        VerificationLogits::new(y, n).unwrap()
    }

    #[test]
    fn self_prompt_normalizes_yes_no() {
        let c = self_prompt_confidence(&logits(libm::log(0.6), libm::log(0.2))).unwrap();
        assert!((c.value() - 0.75).abs() < 1e-12);
        let c = self_prompt_confidence(&logits(3.2, 3.2)).unwrap();
        assert_eq!(c.value(), 0.5);
        let c = self_prompt_confidence(&logits(500.0, -500.0)).unwrap();
        assert!((c.value() - 1.0).abs() <= f64::EPSILON);
    }

    #[test]
    fn self_prompt_rejects_non_finite() {
        let bad = VerificationLogits {
            logit_yes: f64::NAN,
            logit_no: 0.0,
        };
        assert!(matches!(self_prompt_confidence(&bad), Err(Error::InvalidInput(_))));
        assert!(VerificationLogits::new(f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn token_sequence_modes() {
        let p = token_seq_confidence(&[0.5, 0.5], TokenAggregation::Product).unwrap();
        assert_eq!(p.value(), 0.25);
        let m = token_seq_confidence(&[0.2, 0.8], TokenAggregation::Mean).unwrap();
        assert!((m.value() - 0.5).abs() < 1e-15);
        let f = token_seq_confidence(&[0.9, 0.1], TokenAggregation::First).unwrap();
        assert_eq!(f.value(), 0.9);
        assert!(token_seq_confidence(&[], TokenAggregation::Mean).is_err());
        assert!(token_seq_confidence(&[1.2], TokenAggregation::Mean).is_err());
    }

    #[test]
    fn apply_platt_examples() {
        let zero = PlattModel {
            weight_yes: 0.0,
            weight_no: 0.0,
            bias: 0.0,
        };
        assert_eq!(apply_platt(&zero, &logits(7.0, -3.0)).unwrap().value(), 0.5);
        let c = apply_platt(&PlattModel::IDENTITY, &logits(2.0, 0.0)).unwrap();
        // 1 / (1 + e^-2), evaluated by hand
        assert!((c.value() - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn platt_single_class_is_degenerate() {
        let s = vec![(logits(1.0, 0.0), true), (logits(2.0, 0.0), true)];
        assert_eq!(
            fit_platt(&s),
            Err(Error::DegenerateData {
                missing: "incorrect"
            })
        );
        let s = vec![(logits(1.0, 0.0), false), (logits(2.0, 0.0), false)];
        assert_eq!(fit_platt(&s), Err(Error::DegenerateData { missing: "correct" }));
    }

    #[test]
    fn platt_symmetric_data_is_half_at_origin() {
        let mut s = Vec::new();
        for t in [0.5, 1.0, 2.0] {
            s.push((logits(t, -t), true));
            s.push((logits(-t, t), false));
            // a few label flips so the data is not separable
            s.push((logits(t * 0.3, -t * 0.3), false));
            s.push((logits(-t * 0.3, t * 0.3), true));
        }
        let m = fit_platt(&s).unwrap();
        let c = apply_platt(&m, &logits(0.0, 0.0)).unwrap();
        assert!((c.value() - 0.5).abs() < 1e-9, "{m:?}");
    }

    #[test]
    fn platt_separable_beats_uncalibrated() {
        // labels decided by logit_yes > 1 while the uncalibrated score is
        // centered at 0, so the identity model misplaces its boundary.
        let mut s = Vec::new();
        for i in 0..40 {
            let y = -2.0 + i as f64 * 0.1;
            s.push((logits(y, 0.0), y > 1.0));
        }
        let m = fit_platt(&s).unwrap();
        let fitted: Vec<(f64, bool)> =
            s.iter().map(|(l, y)| (apply_platt(&m, l).unwrap().value(), *y)).collect();
        let raw: Vec<(f64, bool)> = s
            .iter()
            .map(|(l, y)| (self_prompt_confidence(l).unwrap().value(), *y))
            .collect();
        assert!(mean_log_likelihood(&fitted) > mean_log_likelihood(&raw));
    }

    #[test]
    fn platt_recovers_generating_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(20240501);
        let normal = Normal::new(0.0, 2.0).unwrap();
        let samples: Vec<(VerificationLogits, bool)> = (0..1000)
            .map(|_| {
                let y = normal.sample(&mut rng);
                let n = normal.sample(&mut rng);
                let p = sigmoid(1.0 * y - 1.0 * n + 0.0);
                (logits(y, n), rng.random::<f64>() < p)
            })
            .collect();
        let m = fit_platt(&samples).unwrap();
        assert!((m.weight_yes - 1.0).abs() <= 0.2, "{m:?}");
        assert!((m.weight_no + 1.0).abs() <= 0.2, "{m:?}");
        assert!(m.bias.abs() <= 0.2, "{m:?}");
    }

    #[test]
    fn platt_is_deterministic() {
        let s: Vec<_> = (0..50)
            .map(|i| (logits(i as f64 * 0.1 - 2.0, 0.3), i % 3 != 0))
            .collect();
        assert_eq!(fit_platt(&s).unwrap(), fit_platt(&s).unwrap());
    }

    fn conf(v: f64) -> Confidence {
        Confidence::new(v).unwrap()
    }

    #[test]
    fn ece_examples() {
        let all_right: Vec<_> = (0..5).map(|_| (conf(1.0), true)).collect();
        assert_eq!(calibration_report(&all_right, 10).unwrap().ece, 0.0);

        let half: Vec<_> = (0..10).map(|i| (conf(0.9), i < 5)).collect();
        let r = calibration_report(&half, 10).unwrap();
        assert!((r.ece - 0.4).abs() < 1e-12);
        assert_eq!(r.occupied().count(), 1);

        let mut two = Vec::new();
        for i in 0..4 {
            two.push((conf(0.25), i < 1));
            two.push((conf(0.75), i < 3));
        }
        let r = calibration_report(&two, 10).unwrap();
        assert!(r.ece.abs() < 1e-12);
        assert_eq!(r.occupied().count(), 2);
    }

    #[test]
    fn ece_errors() {
        assert!(calibration_report(&[], 10).is_err());
        assert!(calibration_report(&[(conf(0.5), true)], 0).is_err());
    }

    #[test]
    fn estimator_dispatch() {
        let l = logits(2.0, 0.0);
        let sp = ConfidenceEstimator::SelfPrompt.estimate(Some(&l), None).unwrap();
        let pl = ConfidenceEstimator::Platt {
            model: PlattModel::IDENTITY,
        }
        .estimate(Some(&l), None)
        .unwrap();
        assert_eq!(sp, pl);
        let tok = ConfidenceEstimator::TokenSequence {
            mode: TokenAggregation::Product,
        };
        assert!(tok.estimate(Some(&l), None).is_err());
        assert_eq!(tok.estimate(None, Some(&[0.5, 0.5])).unwrap().value(), 0.25);
    }

    proptest! {
        #[test]
        fn self_prompt_shift_invariant(y in -50.0f64..50.0, n in -50.0f64..50.0, k in -100.0f64..100.0) {
            let a = self_prompt_confidence(&logits(y, n)).unwrap().value();
            let b = self_prompt_confidence(&logits(y + k, n + k)).unwrap().value();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn platt_monotone_in_yes(y in -20.0f64..20.0, dy in 0.0f64..10.0, n in -20.0f64..20.0, w in 0.01f64..5.0) {
            let m = PlattModel { weight_yes: w, weight_no: -0.7, bias: 0.3 };
            let lo = apply_platt(&m, &logits(y, n)).unwrap().value();
            let hi = apply_platt(&m, &logits(y + dy, n)).unwrap().value();
            prop_assert!(hi >= lo);
        }

        #[test]
        fn platt_never_loses_to_uncalibrated(
            raw in proptest::collection::vec((-6.0f64..6.0, -6.0f64..6.0, any::<bool>()), 4..120)
        ) {
            let mut s: Vec<_> = raw.iter().map(|&(y, n, c)| (logits(y, n), c)).collect();
            // guarantee both classes
            s.push((logits(0.1, 0.0), true));
            s.push((logits(0.0, 0.1), false));
            let m = fit_platt(&s).unwrap();
            let fitted: Vec<(f64, bool)> = s.iter().map(|(l, y)| (apply_platt(&m, l).unwrap().value(), *y)).collect();
            let base: Vec<(f64, bool)> = s.iter().map(|(l, y)| (self_prompt_confidence(l).unwrap().value(), *y)).collect();
            let slack = PLATT_L2_PENALTY / s.len() as f64 + 1e-12;
            prop_assert!(mean_log_likelihood(&fitted) + slack >= mean_log_likelihood(&base));
        }

        #[test]
        fn ece_bounds_and_counts(
            raw in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200),
            bins in 1usize..25
        ) {
            let s: Vec<_> = raw.iter().map(|&(c, y)| (conf(c), y)).collect();
            let r = calibration_report(&s, bins).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.ece));
            prop_assert_eq!(r.total(), s.len());
            prop_assert_eq!(r.bins.len(), bins);
            let n = s.len() as f64;
            let recomputed: f64 = r.occupied().map(|b| b.count as f64 / n * (b.accuracy - b.mean_confidence).abs()).sum();
            prop_assert!((recomputed - r.ece).abs() < 1e-12);
        }
    }
}
