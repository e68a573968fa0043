//! Record files survive interrupted writes.

use std::fs;

use proptest::prelude::*;
use recoverr::formats::{append_records, read_records_resumable, RunRecord};
use recoverr::recoverr_core::recoverr::CallCounts;
use recoverr::recoverr_core::{Confidence, Prediction, Provenance, SelectiveOutcome};

fn record(i: usize, answered: bool, accuracy: f64) -> RunRecord {
    RunRecord {
        id: format!("test-{i:06}"),
        prediction: Some(Prediction {
            answer: format!("answer \"{i}\" ünï"),
            confidence: Confidence::new(accuracy * 0.9).unwrap(),
            logits: None,
            accuracy: Some(accuracy),
        }),
        outcome: if answered {
            SelectiveOutcome::answered(format!("answer {i}"), Provenance::Recovered)
        } else {
            SelectiveOutcome::abstained()
        },
        accuracy,
        below_threshold: !answered,
        failed_closed: false,
        error: None,
        trace_ref: None,
        calls: CallCounts::default(),
        wall_ms: i as u64,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Cutting the file at any byte leaves a readable prefix of whole records.
    #[test]
    fn any_truncation_reads_as_a_prefix(
        rows in prop::collection::vec((any::<bool>(), 0.0..=1.0f64), 1..20),
        cut in 0.0..=1.0f64,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let records: Vec<RunRecord> = rows.iter().enumerate().map(|(i, (a, acc))| record(i, *a, *acc)).collect();
        append_records(&path, &records).unwrap();
        let bytes = fs::read(&path).unwrap();
        let at = (cut * bytes.len() as f64) as usize;
        fs::write(&path, &bytes[..at]).unwrap();

        let (read, good) = read_records_resumable(&path).unwrap();
        prop_assert!(good as usize <= at);
        prop_assert_eq!(&read[..], &records[..read.len()]);
        let whole_lines = bytes[..at].iter().filter(|&&b| b == b'\n').count();
        prop_assert_eq!(read.len(), whole_lines);
        prop_assert_eq!(good as usize, bytes[..at].iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1));
    }
}

#[test]
fn appends_extend_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    append_records(&path, &[record(0, true, 1.0)]).unwrap();
    append_records(&path, &[record(1, false, 0.0), record(2, true, 0.5)]).unwrap();
    let (read, good) = read_records_resumable(&path).unwrap();
    assert_eq!(read.len(), 3);
    assert_eq!(good, fs::metadata(&path).unwrap().len());
}
