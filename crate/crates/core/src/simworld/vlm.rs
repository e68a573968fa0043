use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::schema::{parse_question, parse_world_ref, AttributeKind};
use super::SimDataset;
use crate::confidence::VerificationLogits;
use crate::error::{Error, Result};
use crate::math::{derive_seed, regularized_incomplete_beta};
use crate::modelio::{ClientError, RawAnswer, VisionLanguageModel};

/// How latent confidence is turned into reported yes/no logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// Reported confidence equals the latent one.
    Calibrated,
    /// Both log-probabilities divided by `temperature`.
    Distorted { temperature: f64 },
    /// `shift` added to the yes log-probability.
    Overconfident { shift: f64 },
}

/// Latent confidence density of one question kind: Beta with mean
/// `accuracy` and concentration `concentration`, a point mass when the
/// accuracy is 0 or 1. Missing fields deserialize to [`FactDensity::UNIFORM`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactDensity {
    pub accuracy: f64,
    pub concentration: f64,
}

impl Default for FactDensity {
    fn default() -> Self {
        Self::UNIFORM
    }
}

impl FactDensity {
    /// Confidence uniform on [0, 1].
    pub const UNIFORM: FactDensity = FactDensity {
        accuracy: 0.5,
        concentration: 2.0,
    };

    pub fn new(accuracy: f64, concentration: f64) -> Self {
        Self {
            accuracy,
            concentration,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::invalid(format!("{what} accuracy {} outside [0, 1]", self.accuracy)));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::invalid(format!(
                "{what} concentration {} must be positive",
                self.concentration
            )));
        }
        Ok(())
    }

    fn is_point_mass(&self) -> bool {
        self.accuracy <= 0.0 || self.accuracy >= 1.0
    }

    pub fn alpha_beta(&self) -> (f64, f64) {
        (
            self.accuracy * self.concentration,
            (1.0 - self.accuracy) * self.concentration,
        )
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.is_point_mass() {
            return self.accuracy;
        }
        let (a, b) = self.alpha_beta();
        Beta::new(a, b).expect("validated shape").sample(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimVlmProfile {
    /// Density for observable attributes, distractors included.
    pub base: FactDensity,
    /// Density for derived attributes.
    pub derived: FactDensity,
    pub confidence_mode: ConfidenceMode,
    pub seed: u64,
}

impl SimVlmProfile {
    pub fn new(base_fact_accuracy: f64, derived_fact_accuracy: f64, seed: u64) -> Self {
        Self {
            base: FactDensity::new(base_fact_accuracy, 2.0),
            derived: FactDensity::new(derived_fact_accuracy, 2.0),
            confidence_mode: ConfidenceMode::Calibrated,
            seed,
        }
    }

    /// Calibrated model whose confidence on every question is uniform.
    pub fn uniform(seed: u64) -> Self {
        Self {
            base: FactDensity::UNIFORM,
            derived: FactDensity::UNIFORM,
            confidence_mode: ConfidenceMode::Calibrated,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate("base fact")?;
        self.derived.validate("derived fact")?;
        match self.confidence_mode {
            ConfidenceMode::Calibrated => Ok(()),
            ConfidenceMode::Distorted { temperature } if temperature > 0.0 && temperature.is_finite() => Ok(()),
            ConfidenceMode::Overconfident { shift } if shift >= 0.0 && shift.is_finite() => Ok(()),
            mode => Err(Error::invalid(format!("bad confidence mode {mode:?}"))),
        }
    }

    /// Reported logits for latent confidence `c`.
    pub fn logits(&self, c: f64) -> VerificationLogits {
        // keep both logs finite at the ends of the interval
        let c = c.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        let (yes, no) = (libm::log(c), libm::log1p(-c));
        let (logit_yes, logit_no) = match self.confidence_mode {
            ConfidenceMode::Calibrated => (yes, no),
            ConfidenceMode::Distorted { temperature } => (yes / temperature, no / temperature),
            ConfidenceMode::Overconfident { shift } => (yes + shift, no),
        };
        VerificationLogits { logit_yes, logit_no }
    }
}

/// `E[1 - c | c >= gamma]` for the derived-question confidence density of a
/// calibrated profile: the expected risk of answering derived questions
/// whose confidence clears `gamma`.
pub fn closed_form_vanilla_risk(profile: &SimVlmProfile, gamma: f64) -> Result<f64> {
    profile.validate()?;
    if profile.confidence_mode != ConfidenceMode::Calibrated {
        return Err(Error::Unsupported("closed-form risk needs a calibrated profile".into()));
    }
    let d = profile.derived;
    if gamma >= 1.0 {
        return Ok(0.0);
    }
    if d.is_point_mass() {
        return if d.accuracy >= gamma {
            Ok(1.0 - d.accuracy)
        } else {
            Err(Error::invalid(format!("nothing is answered at gamma {gamma}")))
        };
    }
    let (a, b) = d.alpha_beta();
    let g = gamma.max(0.0);
    let tail = 1.0 - regularized_incomplete_beta(g, a, b);
    if tail <= 0.0 {
        return Ok(0.0);
    }
    let mean_tail = d.accuracy * (1.0 - regularized_incomplete_beta(g, a + 1.0, b));
    Ok(1.0 - mean_tail / tail)
}

/// Answer given when the question is not about a known attribute.
pub const REFUSAL: &str = "unknown";

/// Simulated vision-language model over a synthetic dataset.
///
/// For each (image, question) the latent confidence `c` is drawn from the
/// kind's density and the answer is correct with probability `c`, so the
/// latent confidence is calibrated by construction. Draws are a pure
/// function of the profile seed, the image and the question.
#[derive(Debug, Clone)]
pub struct SimVlm {
    pub dataset: Arc<SimDataset>,
    pub profile: SimVlmProfile,
}

/// One simulated answer with its latent draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SimAnswer {
    pub answer: String,
    pub latent_confidence: f64,
    pub correct: bool,
    pub logits: VerificationLogits,
}

impl SimVlm {
    pub fn new(dataset: Arc<SimDataset>, profile: SimVlmProfile) -> Result<Self> {
        profile.validate()?;
        Ok(Self { dataset, profile })
    }

    pub fn simulate(&self, image: &str, question: &str) -> SimAnswer {
        let refusal = SimAnswer {
            answer: REFUSAL.into(),
            latent_confidence: 0.5,
            correct: false,
            logits: VerificationLogits {
                logit_yes: 0.0,
                logit_no: 0.0,
            },
        };
        let schema = &self.dataset.schema;
        let world = parse_world_ref(image).and_then(|i| self.dataset.worlds.get(i));
        let attr = parse_question(question).and_then(|a| schema.attribute(a));
        let (Some(world), Some((attr_index, attr))) = (world, attr) else {
            return refusal;
        };
        let Some(truth) = world.index_of(schema, attr_index) else {
            return refusal;
        };
        let density = match attr.kind {
            AttributeKind::Derived => self.profile.derived,
            AttributeKind::Base | AttributeKind::Distractor => self.profile.base,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.profile.seed, &[image, question]));
        let c = density.sample(&mut rng);
        let correct = rng.random::<f64>() < c;
        let n = attr.domain.len();
        let index = if correct || n == 1 {
            truth
        } else {
            // uniform over the other values
            let k = rng.random_range(0..n - 1);
            if k >= truth {
                k + 1
            } else {
                k
            }
        };
        SimAnswer {
            answer: attr.domain[index].clone(),
            latent_confidence: c,
            correct: index == truth,
            logits: self.profile.logits(c),
        }
    }
}

impl VisionLanguageModel for SimVlm {
    fn answer(&self, image: &str, question: &str) -> Result<RawAnswer, ClientError> {
        let s = self.simulate(image, question);
        let reported = crate::confidence::self_prompt_confidence(&s.logits)
            .map_err(|e| ClientError::malformed(e.to_string()))?
            .value();
        Ok(RawAnswer {
            answer: s.answer,
            logits: Some(s.logits),
            token_probs: Some(vec![reported]),
        })
    }
}
