//! Calibration, evaluation and reporting over synthetic worlds.

mod common;

use std::collections::BTreeMap;
use std::fs;

use common::World;
use recoverr::formats::{write_json, ThresholdDocument};
use recoverr::harness::{load_run, load_threshold, report_tables, RECORDS_FILE, TABLE_FILE};
use recoverr::recoverr_core::confidence::ConfidenceEstimator;
use recoverr::recoverr_core::simworld::SimDatasetSpec;
use recoverr::recoverr_core::Provenance;
use recoverr::{run_eval, select_threshold_from_artifacts, Error};

const HARD: [&str; 3] = ["sim.base.accuracy=0.95", "sim.derived.accuracy=0.5", "sim.derived.concentration=20.0"];

fn with(extra: &[&'static str]) -> Vec<&'static str> {
    let mut v = HARD.to_vec();
    v.extend_from_slice(extra);
    v
}

fn small() -> World {
    World::new(&SimDatasetSpec::small(1_000, 600), 11)
}

#[test]
fn verification_only_adds_answers() {
    let world = small();
    let (_, vanilla) = world.experiment("vanilla", &with(&["method=vanilla"]));
    let (_, rec) = world.experiment("recoverr", &with(&["method=recoverr"]));
    assert_eq!(vanilla.manifest.gamma, rec.manifest.gamma);
    let by_id: BTreeMap<_, _> = rec.records.iter().map(|r| (r.id.clone(), r)).collect();
    for v in &vanilla.records {
        let r = by_id[&v.id];
        if v.outcome.is_answered() {
            assert!(r.outcome.is_answered(), "{} lost its answer", v.id);
            assert_eq!(r.outcome.provenance, Some(Provenance::Threshold));
        }
        assert_eq!(r.prediction, v.prediction);
    }
    let (vm, rm) = (vanilla.metrics.unwrap(), rec.metrics.unwrap());
    assert!(rm.coverage > vm.coverage);
    assert!(rm.recovered > 0);
}

#[test]
fn counts_partition_the_dataset() {
    let world = small();
    let (_, out) = world.experiment("counts", &with(&["method=recoverr", "models.tools=[\"sim_caption\"]"]));
    let m = out.metrics.unwrap();
    let answered = m.answered_correct + m.answered_incorrect;
    assert_eq!(answered + m.abstained, m.n);
    assert_eq!(m.answered_by_threshold + m.recovered, answered);
    assert_eq!(m.below_threshold + m.answered_by_threshold, m.n);
    assert_eq!(m.n, 600);
    // every below-threshold instance left a trace behind
    let traces = out.records.iter().filter(|r| r.trace_ref.is_some()).count();
    assert_eq!(traces, m.below_threshold);
    for r in out.records.iter().filter_map(|r| r.trace_ref.as_ref()) {
        assert!(world.path().join("counts/run").join(r).exists());
    }
}

#[test]
fn overconfident_model_is_overconfident_in_upper_bins() {
    let world = World::new(&SimDatasetSpec::small(4_000, 0), 12);
    let config = world.config(
        "over",
        &["sim.confidence_mode.mode=overconfident", "sim.confidence_mode.shift=1.5", "calibration.estimator=self_prompt"],
    );
    let cal = world.calibrate(&config);
    let upper: Vec<_> = cal.before.occupied().filter(|b| b.low >= 0.5).collect();
    assert!(!upper.is_empty());
    for b in upper.iter().filter(|b| b.count >= 50) {
        assert!(b.mean_confidence > b.accuracy, "bin {b:?}");
    }
}

#[test]
fn platt_keeps_a_calibrated_model_calibrated() {
    let world = World::new(&SimDatasetSpec::small(6_000, 0), 13);
    let cal = world.calibrate(&world.config("calibrated", &[]));
    assert_eq!((cal.fit_on, cal.threshold_on), (3_000, 3_000));
    assert!(cal.after.ece <= cal.before.ece + 0.005, "{} -> {}", cal.before.ece, cal.after.ece);
    let p = cal.platt.unwrap();
    assert!((p.weight_yes - 1.0).abs() < 0.2 && (p.weight_no + 1.0).abs() < 0.2, "{p:?}");
}

#[test]
fn thresholds_for_other_tolerances_come_from_stored_samples() {
    let world = World::new(&SimDatasetSpec::small(400, 0), 14);
    let config = world.config("thr", &["r=0.1"]);
    let cal = world.calibrate(&config);
    let again = select_threshold_from_artifacts(&config, 0.1).unwrap();
    assert_eq!(again, cal.threshold);
    let looser = select_threshold_from_artifacts(&config, 0.3).unwrap();
    assert!(looser.gamma <= again.gamma && looser.coverage >= again.coverage);
    assert!(config.paths.artifacts.join("threshold-r0.3.json").exists());
}

#[test]
fn too_few_calibration_instances_is_a_config_error() {
    let world = World::new(&SimDatasetSpec::small(60, 0), 15);
    let config = world.config("few", &[]);
    let err = recoverr::run_calibration(&config, &world.models(&config)).unwrap_err();
    assert!(err.to_string().contains("at least 100"), "{err}");
}

#[test]
fn missing_threshold_points_to_calibrate() {
    let world = World::new(&SimDatasetSpec::small(0, 5), 16);
    let config = world.config("none", &[]);
    let err = load_threshold(&config).unwrap_err().to_string();
    assert!(err.contains("calibrate"), "{err}");
}

#[test]
fn resumed_run_matches_and_foreign_output_is_refused() {
    let world = small();
    let full = world.experiment("full", &with(&["method=recoverr"])).1;
    let config = world.config("partial", &with(&["method=recoverr", "run.batch_size=7", "run.stop_after=100"]));
    world.calibrate(&config);
    let first = world.run(&config);
    assert_eq!((first.processed, first.records.len()), (100, 100));
    assert!(first.metrics.is_none());
    let second = world.run(&config);
    assert_eq!(second.records.len(), 200);
    let mut rest = config.clone();
    rest.run.stop_after = None;
    let done = world.run(&rest);
    assert_eq!(done.metrics, full.metrics);
    assert_eq!(common::untimed(&done.records), common::untimed(&full.records));

    // the same output directory with another method
    let mut other = rest.clone();
    other.method = recoverr::Method::Vanilla;
    let err = run_eval(&other, &world.models(&other)).unwrap_err().to_string();
    assert!(err.contains("different run"), "{err}");
}

#[test]
fn records_out_of_dataset_order_are_refused() {
    let world = World::new(&SimDatasetSpec::small(200, 20), 17);
    let config = world.config("order", &["method=vanilla", "run.stop_after=5"]);
    world.calibrate(&config);
    world.run(&config);
    let path = config.paths.output.join(RECORDS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.swap(0, 1);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let err = run_eval(&config, &world.models(&config)).unwrap_err().to_string();
    assert!(err.contains("order"), "{err}");
}

#[test]
fn single_run_report() {
    let world = World::new(&SimDatasetSpec::small(400, 200), 18);
    let (_, out) = world.experiment("solo", &["method=vanilla"]);
    let run = load_run(&world.path().join("solo/run")).unwrap();
    let dir = world.path().join("report");
    let rep = report_tables(&[run], &dir, Some(&world.path().join("solo/artifacts"))).unwrap();
    assert_eq!(rep.rows.len(), 1);
    assert!(rep.comparisons.is_empty());
    let m = out.metrics.unwrap();
    assert_eq!(rep.rows[0].coverage, recoverr::formats::pct(m.coverage));
    let table = fs::read_to_string(dir.join(TABLE_FILE)).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(dir.join("curve_vanilla_r0.2.csv").exists());
    assert!(dir.join("calibration_curve.csv").exists());
}

#[test]
fn report_compares_against_thresholding_and_rejects_mixed_datasets() {
    let world = small();
    world.experiment("v", &with(&["method=vanilla"]));
    world.experiment("c", &with(&["method=recoverr"]));
    let runs = vec![
        load_run(&world.path().join("v/run")).unwrap(),
        load_run(&world.path().join("c/run")).unwrap(),
    ];
    let rep = report_tables(&runs, &world.path().join("rep"), None).unwrap();
    assert_eq!(rep.comparisons.len(), 1);
    let c = &rep.comparisons[0];
    assert_eq!(c.method, "recoverr");
    assert!(c.coverage_gain > 0.0, "{c:?}");

    let other = World::new(&SimDatasetSpec::small(0, 10), 99);
    let config = other.config("x", &["method=vanilla"]);
    let doc = ThresholdDocument {
        r: 0.2,
        gamma: 0.5,
        estimator: ConfidenceEstimator::SelfPrompt,
        coverage: 1.0,
        risk: None,
        selected_on: 1,
    };
    write_json(&config.paths.artifacts.join("threshold-r0.2.json"), &doc).unwrap();
    other.run(&config);
    let mixed = vec![
        load_run(&world.path().join("v/run")).unwrap(),
        load_run(&other.path().join("x/run")).unwrap(),
    ];
    match report_tables(&mixed, &world.path().join("rep2"), None) {
        Err(Error::MixedDatasets(..)) => {}
        other => panic!("expected a mixed-dataset error, got {:?}", other.map(|r| r.rows)),
    }
}

#[test]
fn incomplete_runs_are_not_reported() {
    let world = World::new(&SimDatasetSpec::small(200, 50), 19);
    let config = world.config("inc", &["method=vanilla", "run.stop_after=10"]);
    world.calibrate(&config);
    world.run(&config);
    let err = load_run(&config.paths.output).err().unwrap().to_string();
    assert!(err.contains("incomplete"), "{err}");
}
