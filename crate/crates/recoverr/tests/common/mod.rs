//! Synthetic-world experiment scaffolding shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use recoverr::formats::{write_json, write_jsonl, RunRecord};
use recoverr::recoverr_core::simworld::{gen_dataset, SimDataset, SimDatasetSpec};
use recoverr::{run_calibration, run_eval, CalibrationOutcome, Models, RunConfig, RunOutcome};
use tempfile::TempDir;

/// A generated world written to a temporary directory.
pub struct World {
    pub dir: TempDir,
    pub data: Arc<SimDataset>,
}

impl World {
    pub fn new(spec: &SimDatasetSpec, seed: u64) -> Self {
        let dir = tempfile::tempdir().expect("temp dir");
        let data = gen_dataset(spec, seed).expect("dataset");
        write_jsonl(&dir.path().join("calibration.jsonl"), &data.calibration).unwrap();
        write_jsonl(&dir.path().join("test.jsonl"), &data.test).unwrap();
        write_json(&dir.path().join("world.json"), &data).unwrap();
        Self {
            dir,
            data: Arc::new(data),
        }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Configuration whose artifacts and output live under `label`.
    pub fn config(&self, label: &str, sets: &[&str]) -> RunConfig {
        let root = self.path();
        let mut all = vec![
            format!("paths.world={}", quoted(&root.join("world.json"))),
            format!("paths.calibration={}", quoted(&root.join("calibration.jsonl"))),
            format!("paths.dataset={}", quoted(&root.join("test.jsonl"))),
            format!("paths.artifacts={}", quoted(&root.join(label).join("artifacts"))),
            format!("paths.output={}", quoted(&root.join(label).join("run"))),
        ];
        all.extend(sets.iter().map(|s| s.to_string()));
        RunConfig::load(None, &all).expect("config")
    }

    pub fn models(&self, config: &RunConfig) -> Models {
        Models::from_config(config, Some(Arc::clone(&self.data))).expect("models")
    }

    pub fn calibrate(&self, config: &RunConfig) -> CalibrationOutcome {
        run_calibration(config, &self.models(config)).expect("calibration")
    }

    pub fn run(&self, config: &RunConfig) -> RunOutcome {
        run_eval(config, &self.models(config)).expect("run")
    }

    /// Calibrates and runs in one go.
    pub fn experiment(&self, label: &str, sets: &[&str]) -> (CalibrationOutcome, RunOutcome) {
        let config = self.config(label, sets);
        let cal = self.calibrate(&config);
        (cal, self.run(&config))
    }
}

/// TOML string literal for a path.
pub fn quoted(p: &Path) -> String {
    toml_string(&p.display().to_string())
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

pub fn untimed(records: &[RunRecord]) -> Vec<RunRecord> {
    records.iter().map(RunRecord::untimed).collect()
}

pub fn output_dir(config: &RunConfig) -> PathBuf {
    config.paths.output.clone()
}
