//! On-disk documents: line-delimited instances and records, calibration
//! artifacts, metrics and CSV tables.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use recoverr_core::confidence::{ConfidenceEstimator, PlattModel, VerificationLogits};
use recoverr_core::modelio::ClientError;
use recoverr_core::recoverr::CallCounts;
use recoverr_core::selective::ScoredOutcome;
use recoverr_core::{Instance, MetricsReport, Prediction, SelectiveOutcome};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).expect("serializable");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_instances(path: &Path) -> Result<Vec<Instance>> {
    let instances: Vec<Instance> = read_jsonl(path)?;
    for (i, inst) in instances.iter().enumerate() {
        inst.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(instances)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// One calibration observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub id: String,
    pub logit_yes: f64,
    pub logit_no: f64,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_probs: Option<Vec<f64>>,
}

impl CalibrationSample {
    pub fn logits(&self) -> VerificationLogits {
        VerificationLogits {
            logit_yes: self.logit_yes,
            logit_no: self.logit_no,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattDocument {
    pub weight_yes: f64,
    pub weight_no: f64,
    pub bias: f64,
    pub fitted_on: usize,
}

impl PlattDocument {
    pub fn new(model: PlattModel, fitted_on: usize) -> Self {
        Self {
            weight_yes: model.weight_yes,
            weight_no: model.weight_no,
            bias: model.bias,
            fitted_on,
        }
    }

    pub fn model(&self) -> PlattModel {
        PlattModel {
            weight_yes: self.weight_yes,
            weight_no: self.weight_no,
            bias: self.bias,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDocument {
    pub r: f64,
    pub gamma: f64,
    /// How confidences were computed when the threshold was chosen.
    pub estimator: ConfidenceEstimator,
    /// Coverage and risk on the set the threshold was selected on.
    pub coverage: f64,
    pub risk: Option<f64>,
    pub selected_on: usize,
}

/// File name of the threshold for risk tolerance `r` inside an artifacts directory.
pub fn threshold_file(r: f64) -> String {
    format!("threshold-r{r}.json")
}

/// Per-instance result of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    /// Absent when the initial answer could not be obtained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
    pub outcome: SelectiveOutcome,
    pub accuracy: f64,
    pub below_threshold: bool,
    pub failed_closed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ClientError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_ref: Option<String>,
    pub calls: CallCounts,
    /// Wall time in milliseconds; excluded from run-to-run comparisons.
    pub wall_ms: u64,
}

impl RunRecord {
    pub fn scored(&self) -> ScoredOutcome {
        ScoredOutcome {
            answered: self.outcome.is_answered(),
            accuracy: self.accuracy,
            provenance: self.outcome.provenance,
            below_threshold: self.below_threshold,
            failed_closed: self.failed_closed,
        }
    }

    /// The record with its timing zeroed, for determinism comparisons.
    pub fn untimed(&self) -> Self {
        Self {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

/// Reads a records file written by an interrupted or finished run.
///
/// A final line without a terminating newline, or one that does not parse,
/// is an interrupted write: it is dropped and the returned byte length
/// excludes it so the caller can truncate the file.
pub fn read_records_resumable(path: &Path) -> Result<(Vec<RunRecord>, u64)> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut records = Vec::new();
    let mut good = 0usize;
    let mut start = 0usize;
    let mut line_no = 0usize;
    while start < bytes.len() {
        line_no += 1;
        let Some(rel) = bytes[start..].iter().position(|&b| b == b'\n') else {
            log::warn!("{}: dropping partial final record", path.display());
            break;
        };
        let line = &bytes[start..start + rel];
        let end = start + rel + 1;
        if !line.iter().all(u8::is_ascii_whitespace) {
            match serde_json::from_slice::<RunRecord>(line) {
                Ok(r) => records.push(r),
                Err(e) if end == bytes.len() => {
                    log::warn!("{}: dropping unreadable final record: {e}", path.display());
                    break;
                }
                Err(e) => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        message: e.to_string(),
                    })
                }
            }
        }
        good = end;
        start = end;
    }
    Ok((records, good as u64))
}

/// Appends records and flushes them to disk.
pub fn append_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    ensure_parent(path)?;
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("serializable");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    w.get_ref().sync_data().map_err(|e| Error::io(path, e))
}

pub fn metrics_from_records(records: &[RunRecord]) -> Result<MetricsReport> {
    let scored: Vec<ScoredOutcome> = records.iter().map(RunRecord::scored).collect();
    Ok(MetricsReport::from_outcomes(&scored)?)
}

/// Percentage rounded to one decimal.
pub fn pct(x: f64) -> f64 {
    (x * 1000.0).round() / 10.0
}

/// One row in the layout of the main results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub r: f64,
    pub n: usize,
    pub coverage: f64,
    pub risk: Option<f64>,
    pub phi1: f64,
    pub recall: Option<f64>,
}

impl TableRow {
    pub fn new(method: &str, r: f64, m: &MetricsReport) -> Self {
        Self {
            method: method.to_string(),
            r,
            n: m.n,
            coverage: pct(m.coverage),
            risk: m.risk.map(pct),
            phi1: pct(m.effective_reliability),
            recall: m.selective_recall.map(pct),
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use recoverr_core::Confidence;

    fn record(id: &str) -> RunRecord {
        RunRecord {
            id: id.into(),
            prediction: Some(Prediction {
                answer: "two".into(),
                confidence: Confidence::new(0.3).unwrap(),
                logits: None,
                accuracy: Some(1.0),
            }),
            outcome: SelectiveOutcome::abstained(),
            accuracy: 1.0,
            below_threshold: true,
            failed_closed: false,
            error: None,
            trace_ref: None,
            calls: CallCounts::default(),
            wall_ms: 3,
        }
    }

    #[test]
    fn truncated_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        append_records(&path, &[record("a"), record("b")]).unwrap();
        let full = fs::read(&path).unwrap();
        let (recs, len) = read_records_resumable(&path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(len as usize, full.len());
        fs::write(&path, &full[..full.len() - 10]).unwrap();
        let (recs, len) = read_records_resumable(&path).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(&full[..len as usize], &full[..full.iter().position(|&b| b == b'\n').unwrap() + 1]);
    }

    #[test]
    fn missing_records_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(read_records_resumable(&dir.path().join("none")).unwrap().0.len(), 0);
    }

    #[test]
    fn percentages_round_to_one_decimal() {
        assert_eq!(pct(0.21949), 21.9);
        assert_eq!(pct(0.2195), 22.0);
    }
}
