//! Selective prediction with evidence-based verification of low-confidence answers.
//!
//! A selective vision-language system answers a question only when its
//! confidence clears a threshold chosen for a user risk tolerance. This crate
//! holds the pure algorithmic pieces of such a system:
//!
//! - [`confidence`]: self-prompted yes/no confidence, token-sequence baselines,
//!   two-feature Platt scaling and binned expected calibration error.
//! - [`selective`]: the threshold decision, coverage/risk/effective reliability/recall,
//!   threshold selection for a risk tolerance and risk-coverage curves.
//! - [`recoverr`]: the verification loop that collects reliable, relevant
//!   evidence for a low-confidence answer and checks entailment before
//!   answering instead of abstaining.
//! - [`modelio`]: client traits for every model the loop consults, prompt
//!   templates, sub-question parsing and yes/no logit extraction.
//! - [`simworld`]: a fully observable synthetic world with exact entailment and
//!   calibrated-by-construction simulated models, used as a test oracle.
//! - [`judge`]: answer normalization and accuracy scoring.
//!
//! The crate is `no_std` and only needs `alloc`. IO, HTTP backends, on-disk
//! formats and the command line live in the companion `recoverr` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod confidence;
pub mod error;
pub mod judge;
pub mod math;
pub mod modelio;
pub mod recoverr;
pub mod selective;
pub mod simworld;

pub use confidence::{
    apply_platt, calibration_report, fit_platt, self_prompt_confidence, token_seq_confidence,
    CalibrationBin, CalibrationReport, Confidence, ConfidenceEstimator, PlattModel,
    TokenAggregation, VerificationLogits,
};
pub use error::{Error, Result};
pub use selective::{
    Decision, Instance, MetricsReport, Prediction, Provenance, SelectiveOutcome, ThresholdChoice,
    ABSTAIN_SENTINEL,
};
