//! Runs selective visual question answering experiments end to end.
//!
//! This crate wraps [`recoverr_core`] with everything that needs the
//! standard library: chat-completion backends with a content-addressed
//! response cache, TOML configuration, on-disk record formats, the
//! calibration and evaluation harness, trace replay, and the `recoverr`
//! command line.

pub mod backend;
pub mod config;
pub mod error;
pub mod formats;
pub mod harness;
pub mod models;
pub mod replay;

pub use config::{Method, RunConfig};
pub use error::{Error, Result};
pub use harness::{
    calibrate_samples, load_run, report_tables, run_calibration, run_eval, select_threshold_from_artifacts,
    CalibrationOutcome, Models, RunOutcome,
};
pub use recoverr_core;
