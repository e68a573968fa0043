//! Calibration, the evaluation loop and report tables.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use recoverr_core::confidence::{calibration_report, fit_platt, CalibrationReport, ConfidenceEstimator, PlattModel};
use recoverr_core::judge::judge_accuracy;
use recoverr_core::modelio::{
    ClientError, ClientErrorKind, EntailmentModel, Negator, Paraphraser, QuestionGenerator, TextNegator,
    VisionLanguageModel, VisionTool,
};
use recoverr_core::recoverr::{self as engine, CallCounts, Clients, RecoverrParams, TerminalKind};
use recoverr_core::selective::{coverage_at_risk, decide, risk_coverage_curve, select_threshold, CurvePoint};
use recoverr_core::simworld::{SimCaptionTool, SimDataset, SimNegator, SimNli, SimParaphraser, SimQgen, SimVlm};
use recoverr_core::{Confidence, Instance, MetricsReport, Prediction, Provenance, SelectiveOutcome};
use serde::{Deserialize, Serialize};

use crate::backend::{CachedBackend, ChatBackend, HttpBackend};
use crate::config::{EstimatorKind, JudgeMode, Method, RunConfig, SIM, SIM_CAPTION};
use crate::error::{Error, Result};
use crate::formats::{
    append_records, file_digest, metrics_from_records, pct, read_instances, read_json, read_jsonl,
    read_records_resumable, threshold_file, write_csv, write_json, write_jsonl, CalibrationSample, PlattDocument,
    RunRecord, TableRow, ThresholdDocument,
};
use crate::models::{ChatCaptionTool, ChatJudge, ChatNli, ChatParaphraser, ChatQgen, ChatVlm};

pub const SAMPLES_FILE: &str = "calibration_samples.jsonl";
pub const PLATT_FILE: &str = "platt.json";
pub const CALIBRATION_REPORT_FILE: &str = "calibration_report.json";
pub const CALIBRATION_CURVE_FILE: &str = "calibration_curve.csv";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const TRACES_DIR: &str = "traces";

pub enum Judge {
    Match(recoverr_core::judge::MatchMode),
    Model(ChatJudge),
}

impl Judge {
    pub fn accuracy(&self, instance: &Instance, answer: &str) -> Result<f64> {
        match self {
            Judge::Match(mode) => Ok(judge_accuracy(answer, &instance.gold_answers, *mode)?),
            Judge::Model(j) => Ok(j.judge(&instance.question, answer, &instance.gold_answers)?),
        }
    }
}

/// Every client a run needs, resolved from the configuration.
pub struct Models {
    pub vlm: Arc<dyn VisionLanguageModel>,
    pub qgen: Arc<dyn QuestionGenerator>,
    pub paraphraser: Arc<dyn Paraphraser>,
    pub nli: Arc<dyn EntailmentModel>,
    pub negator: Arc<dyn Negator>,
    pub tools: Vec<Box<dyn VisionTool>>,
    pub judge: Judge,
    pub backends: BTreeMap<String, Arc<CachedBackend>>,
}

pub fn load_world(path: &Path) -> Result<Arc<SimDataset>> {
    let world: SimDataset = read_json(path)?;
    world.validate().map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    Ok(Arc::new(world))
}

impl Models {
    /// Builds clients from the configuration, loading the world when a
    /// `sim` role needs it and none is given.
    pub fn from_config(config: &RunConfig, world: Option<Arc<SimDataset>>) -> Result<Self> {
        let m = &config.models;
        let world = match (world, m.uses_sim()) {
            (Some(w), _) => Some(w),
            (None, true) => {
                let path = config
                    .paths
                    .world
                    .as_deref()
                    .ok_or_else(|| Error::config("sim roles need paths.world"))?;
                Some(load_world(path)?)
            }
            (None, false) => None,
        };
        let sim_world = || world.clone().expect("loaded when a sim role is configured");

        let mut backends = BTreeMap::new();
        let mut backend = |name: &str| -> Result<Arc<CachedBackend>> {
            if let Some(b) = backends.get(name) {
                return Ok(Arc::clone(b));
            }
            let cfg = config
                .backends
                .get(name)
                .ok_or_else(|| Error::config(format!("no backend named {name:?}")))?;
            let inner: Arc<dyn ChatBackend> = Arc::new(HttpBackend::new(name, cfg.clone())?);
            let cached = Arc::new(CachedBackend::new(inner, config.paths.cache.clone(), cfg.parallelism));
            backends.insert(name.to_string(), Arc::clone(&cached));
            Ok(cached)
        };

        let vlm: Arc<dyn VisionLanguageModel> = if m.vlm == SIM {
            Arc::new(SimVlm::new(sim_world(), config.sim.profile(config.seeds.vlm))?)
        } else {
            Arc::new(ChatVlm {
                backend: backend(&m.vlm)?,
                max_answer_tokens: m.max_answer_tokens,
            })
        };
        let qgen: Arc<dyn QuestionGenerator> = if m.qgen == SIM {
            let w = sim_world();
            let ratio = config.sim.distractor_ratio.unwrap_or(w.distractor_ratio);
            Arc::new(SimQgen::new(w, ratio, config.seeds.qgen))
        } else {
            Arc::new(ChatQgen {
                backend: backend(&m.qgen)?,
                temperature: m.qgen_temperature,
                seed: config.seeds.qgen,
                max_tokens: 256,
            })
        };
        let paraphraser: Arc<dyn Paraphraser> = if m.paraphrase == SIM {
            Arc::new(SimParaphraser)
        } else {
            Arc::new(ChatParaphraser {
                backend: backend(&m.paraphrase)?,
            })
        };
        let nli: Arc<dyn EntailmentModel> = if m.nli == SIM {
            Arc::new(SimNli { dataset: sim_world() })
        } else {
            Arc::new(ChatNli {
                backend: backend(&m.nli)?,
            })
        };
        let negator: Arc<dyn Negator> = if m.negator == SIM {
            Arc::new(SimNegator)
        } else {
            Arc::new(TextNegator)
        };
        let mut tools: Vec<Box<dyn VisionTool>> = Vec::new();
        for t in &m.tools {
            if t == SIM_CAPTION {
                tools.push(Box::new(SimCaptionTool {
                    dataset: sim_world(),
                    reveal_fraction: config.sim.caption_reveal_fraction,
                    accuracy: config.sim.caption_accuracy,
                    seed: config.seeds.tool,
                }));
            } else {
                tools.push(Box::new(ChatCaptionTool {
                    name: t.clone(),
                    backend: backend(t)?,
                }));
            }
        }
        let judge = match config.judge.mode {
            JudgeMode::LlmJudge => {
                let name = config.judge.backend.as_deref().expect("validated");
                Judge::Model(ChatJudge { backend: backend(name)? })
            }
            mode => Judge::Match(mode.match_mode().expect("model-free mode")),
        };
        Ok(Self {
            vlm,
            qgen,
            paraphraser,
            nli,
            negator,
            tools,
            judge,
            backends,
        })
    }
}

fn instance_error(id: &str, e: impl Into<Error>) -> Error {
    Error::Instance {
        id: id.to_string(),
        source: Box::new(e.into()),
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| Error::config(format!("{key} is not set")))?;
    if !p.exists() {
        return Err(Error::config(format!("{key} = {} does not exist", p.display())));
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// calibration

/// Queries the VLM on every calibration instance; any client error aborts.
pub fn collect_calibration_samples(
    config: &RunConfig,
    models: &Models,
    instances: &[Instance],
) -> Result<Vec<CalibrationSample>> {
    let pool = thread_pool(config.run.workers)?;
    pool.install(|| {
        instances
            .par_iter()
            .map(|inst| {
                let raw = models
                    .vlm
                    .answer(&inst.image_ref, &inst.question)
                    .map_err(|e| instance_error(&inst.id, e))?;
                let logits = raw.logits.ok_or_else(|| {
                    instance_error(&inst.id, ClientError::capability("VLM returned no yes/no logits"))
                })?;
                let accuracy = models
                    .judge
                    .accuracy(inst, &raw.answer)
                    .map_err(|e| instance_error(&inst.id, e))?;
                Ok(CalibrationSample {
                    id: inst.id.clone(),
                    logit_yes: logits.logit_yes,
                    logit_no: logits.logit_no,
                    correct: accuracy >= 0.5,
                    token_probs: raw.token_probs,
                })
            })
            .collect()
    })
}

/// `(fit, threshold)` sizes for `n` samples.
pub fn split_sizes(n: usize, cfg: &crate::config::CalibrationConfig) -> Result<(usize, usize)> {
    if n >= cfg.fit_size + cfg.threshold_size {
        return Ok((cfg.fit_size, cfg.threshold_size));
    }
    let minimum = 2 * cfg.min_split.max(1);
    if n < minimum {
        return Err(Error::config(format!(
            "calibration set has {n} instances; at least {minimum} are needed for the fit/threshold split"
        )));
    }
    Ok((n / 2, n - n / 2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub samples: usize,
    pub fit_on: usize,
    pub threshold_on: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platt: Option<PlattModel>,
    pub threshold: ThresholdDocument,
    /// Self-prompt confidence on the threshold set.
    pub before: CalibrationReport,
    /// Configured estimator on the threshold set.
    pub after: CalibrationReport,
}

fn sample_confidence(estimator: &ConfidenceEstimator, s: &CalibrationSample) -> Result<Confidence> {
    estimator
        .estimate(Some(&s.logits()), s.token_probs.as_deref())
        .map_err(|e| instance_error(&s.id, e))
}

fn choose_threshold(
    estimator: ConfidenceEstimator,
    set: &[CalibrationSample],
    r: f64,
) -> Result<ThresholdDocument> {
    let scored = set
        .iter()
        .map(|s| Ok((sample_confidence(&estimator, s)?, if s.correct { 1.0 } else { 0.0 })))
        .collect::<Result<Vec<_>>>()?;
    let choice = select_threshold(&scored, r)?;
    Ok(ThresholdDocument {
        r,
        gamma: choice.gamma,
        estimator,
        coverage: choice.coverage,
        risk: choice.risk,
        selected_on: scored.len(),
    })
}

/// Splits the samples, fits the estimator and selects the threshold.
///
/// Platt is fit on the first part and the threshold chosen on the second.
/// Estimators with nothing to fit use every sample for the threshold.
pub fn calibrate_samples(
    samples: &[CalibrationSample],
    cfg: &crate::config::CalibrationConfig,
    r: f64,
) -> Result<CalibrationOutcome> {
    let (platt, estimator, fit_on, held) = match cfg.estimator {
        EstimatorKind::Platt => {
            let (fit, thr) = split_sizes(samples.len(), cfg)?;
            let pairs: Vec<_> = samples[..fit].iter().map(|s| (s.logits(), s.correct)).collect();
            let model = fit_platt(&pairs)?;
            (Some(model), ConfidenceEstimator::Platt { model }, fit, &samples[fit..fit + thr])
        }
        EstimatorKind::SelfPrompt => (None, ConfidenceEstimator::SelfPrompt, 0, samples),
        kind => (
            None,
            ConfidenceEstimator::TokenSequence {
                mode: kind.token_mode().expect("token estimator"),
            },
            0,
            samples,
        ),
    };
    if held.is_empty() {
        return Err(Error::config("empty calibration set"));
    }
    let threshold = choose_threshold(estimator, held, r)?;
    let report = |est: &ConfidenceEstimator| -> Result<CalibrationReport> {
        let scored = held
            .iter()
            .map(|s| Ok((sample_confidence(est, s)?, s.correct)))
            .collect::<Result<Vec<_>>>()?;
        Ok(calibration_report(&scored, cfg.num_bins)?)
    };
    Ok(CalibrationOutcome {
        samples: samples.len(),
        fit_on,
        threshold_on: held.len(),
        platt,
        threshold,
        before: report(&ConfidenceEstimator::SelfPrompt)?,
        after: report(&estimator)?,
    })
}

#[derive(Debug, Clone, Serialize)]
struct CurveBinRow<'a> {
    stage: &'a str,
    low: f64,
    high: f64,
    mean_confidence: f64,
    accuracy: f64,
    count: usize,
}

fn write_calibration_curve(path: &Path, outcome: &CalibrationOutcome) -> Result<()> {
    let rows: Vec<CurveBinRow<'_>> = [("before", &outcome.before), ("after", &outcome.after)]
        .into_iter()
        .flat_map(|(stage, rep)| {
            rep.bins.iter().map(move |b| CurveBinRow {
                stage,
                low: b.low,
                high: b.high,
                mean_confidence: b.mean_confidence,
                accuracy: b.accuracy,
                count: b.count,
            })
        })
        .collect();
    write_csv(path, &rows)
}

fn write_calibration_artifacts(dir: &Path, outcome: &CalibrationOutcome) -> Result<()> {
    if let Some(model) = outcome.platt {
        write_json(&dir.join(PLATT_FILE), &PlattDocument::new(model, outcome.fit_on))?;
    }
    write_json(&dir.join(threshold_file(outcome.threshold.r)), &outcome.threshold)?;
    write_json(&dir.join(CALIBRATION_REPORT_FILE), outcome)?;
    write_calibration_curve(&dir.join(CALIBRATION_CURVE_FILE), outcome)
}

/// Collects samples on the calibration instances, fits, selects the
/// threshold for `config.r` and writes every artifact.
pub fn run_calibration(config: &RunConfig, models: &Models) -> Result<CalibrationOutcome> {
    let path = required(&config.paths.calibration, "paths.calibration")?;
    let instances = read_instances(path)?;
    if config.calibration.estimator == EstimatorKind::Platt {
        split_sizes(instances.len(), &config.calibration)?;
    }
    let samples = collect_calibration_samples(config, models, &instances)?;
    let dir = &config.paths.artifacts;
    write_jsonl(&dir.join(SAMPLES_FILE), &samples)?;
    let outcome = calibrate_samples(&samples, &config.calibration, config.r)?;
    write_calibration_artifacts(dir, &outcome)?;
    Ok(outcome)
}

/// Re-selects the threshold for `r` from stored samples and the stored
/// estimator, without querying any model.
pub fn select_threshold_from_artifacts(config: &RunConfig, r: f64) -> Result<ThresholdDocument> {
    let dir = &config.paths.artifacts;
    let samples: Vec<CalibrationSample> = read_jsonl(&dir.join(SAMPLES_FILE))?;
    let cfg = &config.calibration;
    let (estimator, held) = match cfg.estimator {
        EstimatorKind::Platt => {
            let doc: PlattDocument = read_json(&dir.join(PLATT_FILE))?;
            let (fit, thr) = split_sizes(samples.len(), cfg)?;
            if fit != doc.fitted_on {
                return Err(Error::config(format!(
                    "{} was fit on {} samples but the split gives {fit}",
                    PLATT_FILE, doc.fitted_on
                )));
            }
            (ConfidenceEstimator::Platt { model: doc.model() }, &samples[fit..fit + thr])
        }
        EstimatorKind::SelfPrompt => (ConfidenceEstimator::SelfPrompt, &samples[..]),
        kind => (
            ConfidenceEstimator::TokenSequence {
                mode: kind.token_mode().expect("token estimator"),
            },
            &samples[..],
        ),
    };
    let doc = choose_threshold(estimator, held, r)?;
    write_json(&dir.join(threshold_file(r)), &doc)?;
    Ok(doc)
}

// ---------------------------------------------------------------------------
// evaluation

/// What a run directory was produced from; a resumed run must match it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: Method,
    pub r: f64,
    pub gamma: f64,
    pub estimator: ConfidenceEstimator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<RecoverrParams>,
    pub dataset: PathBuf,
    /// SHA-256 of the dataset file.
    pub dataset_id: String,
    pub n_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub method: Method,
    pub r: f64,
    pub gamma: f64,
    pub dataset_id: String,
    pub metrics: MetricsReport,
    /// Percentages rounded to one decimal.
    pub table: TableRow,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    /// Records on disk after this call.
    pub records: Vec<RunRecord>,
    /// Instances processed by this call.
    pub processed: usize,
    /// `None` until every instance has a record.
    pub metrics: Option<MetricsReport>,
}

struct RunContext<'a> {
    models: &'a Models,
    method: Method,
    gamma: f64,
    estimator: ConfidenceEstimator,
    params: Option<RecoverrParams>,
    fail_closed: bool,
    traces: Option<PathBuf>,
}

fn trace_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("{safe}.json")
}

fn fails_closed(ctx: &RunContext<'_>, e: &ClientError) -> bool {
    ctx.fail_closed && matches!(e.kind, ClientErrorKind::Transport | ClientErrorKind::Malformed)
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis().try_into().unwrap_or(u64::MAX)
}

fn process(inst: &Instance, ctx: &RunContext<'_>) -> Result<RunRecord> {
    let start = Instant::now();
    let mut calls = CallCounts {
        vlm: 1,
        ..CallCounts::default()
    };
    let raw = match ctx.models.vlm.answer(&inst.image_ref, &inst.question) {
        Ok(raw) => raw,
        Err(e) if fails_closed(ctx, &e) => {
            log::warn!("instance {}: abstaining, initial answer failed: {e}", inst.id);
            return Ok(RunRecord {
                id: inst.id.clone(),
                prediction: None,
                outcome: SelectiveOutcome::abstained(),
                accuracy: 0.0,
                below_threshold: false,
                failed_closed: true,
                error: Some(e),
                trace_ref: None,
                calls,
                wall_ms: elapsed_ms(start),
            });
        }
        Err(e) => return Err(instance_error(&inst.id, e)),
    };
    let confidence = ctx
        .estimator
        .estimate(raw.logits.as_ref(), raw.token_probs.as_deref())
        .map_err(|e| instance_error(&inst.id, ClientError::capability(e.to_string())))?;
    let accuracy = ctx
        .models
        .judge
        .accuracy(inst, &raw.answer)
        .map_err(|e| instance_error(&inst.id, e))?;
    let prediction = Prediction {
        answer: raw.answer,
        confidence,
        logits: raw.logits,
        accuracy: Some(accuracy),
    };
    let below_threshold = !decide(confidence, ctx.gamma);

    let (outcome, failed_closed, error, trace_ref) = match ctx.params {
        None => {
            let outcome = if below_threshold {
                SelectiveOutcome::abstained()
            } else {
                SelectiveOutcome::answered(prediction.answer.clone(), Provenance::Threshold)
            };
            (outcome, false, None, None)
        }
        Some(params) => {
            let clients = Clients {
                vlm: ctx.models.vlm.as_ref(),
                estimator: ctx.estimator,
                qgen: ctx.models.qgen.as_ref(),
                paraphraser: ctx.models.paraphraser.as_ref(),
                nli: ctx.models.nli.as_ref(),
                negator: ctx.models.negator.as_ref(),
                tools: &ctx.models.tools,
            };
            let (outcome, trace) =
                engine::run(inst, &prediction, &params, &clients).map_err(|e| instance_error(&inst.id, e))?;
            let failed = trace.terminal.kind == TerminalKind::FailedClosed;
            let error = trace.terminal.error.clone();
            if let Some(e) = &error {
                if !matches!(e.kind, ClientErrorKind::Transport | ClientErrorKind::Malformed) {
                    return Err(instance_error(&inst.id, e.clone()));
                }
            }
            calls.vlm += trace.calls.vlm;
            calls.qgen += trace.calls.qgen;
            calls.paraphrase += trace.calls.paraphrase;
            calls.nli += trace.calls.nli;
            calls.negate += trace.calls.negate;
            calls.tool += trace.calls.tool;
            let trace_ref = match &ctx.traces {
                Some(dir) if below_threshold => {
                    let name = trace_file_name(&inst.id);
                    write_json(&dir.join(&name), &trace)?;
                    Some(format!("{TRACES_DIR}/{name}"))
                }
                _ => None,
            };
            (outcome, failed, error, trace_ref)
        }
    };
    Ok(RunRecord {
        id: inst.id.clone(),
        prediction: Some(prediction),
        outcome,
        accuracy,
        below_threshold,
        failed_closed,
        error,
        trace_ref,
        calls,
        wall_ms: elapsed_ms(start),
    })
}

/// Loads the threshold artifact for `config.r`.
pub fn load_threshold(config: &RunConfig) -> Result<ThresholdDocument> {
    let path = config.paths.artifacts.join(threshold_file(config.r));
    if !path.exists() {
        return Err(Error::config(format!(
            "{} is missing; run calibrate or select-threshold for r = {}",
            path.display(),
            config.r
        )));
    }
    read_json(&path)
}

fn truncate(path: &Path, len: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    if f.metadata().map_err(|e| Error::io(path, e))?.len() != len {
        f.set_len(len).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Runs the configured method over the dataset, resuming from any records
/// already in the output directory.
pub fn run_eval(config: &RunConfig, models: &Models) -> Result<RunOutcome> {
    let dataset = required(&config.paths.dataset, "paths.dataset")?;
    let instances = read_instances(dataset)?;
    let threshold = load_threshold(config)?;
    let params = match config.method {
        Method::Vanilla => None,
        Method::VisionTools => {
            let mut p = config.recoverr.apply(config.r, threshold.gamma);
            p.n_turns = 0;
            Some(p)
        }
        Method::Recoverr => Some(config.recoverr.apply(config.r, threshold.gamma)),
    };
    if let Some(p) = &params {
        p.validate()?;
    }
    let manifest = RunManifest {
        method: config.method,
        r: config.r,
        gamma: threshold.gamma,
        estimator: threshold.estimator,
        params,
        dataset: dataset.to_path_buf(),
        dataset_id: file_digest(dataset)?,
        n_instances: instances.len(),
    };

    let out = &config.paths.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let records_path = out.join(RECORDS_FILE);
    let manifest_path = out.join(MANIFEST_FILE);
    let (mut done, good_len) = read_records_resumable(&records_path)?;
    if manifest_path.exists() && !done.is_empty() {
        let previous: RunManifest = read_json(&manifest_path)?;
        let same = RunManifest {
            dataset: previous.dataset.clone(),
            ..manifest.clone()
        };
        if previous != same {
            return Err(Error::config(format!(
                "{} holds records of a different run; choose another paths.output",
                out.display()
            )));
        }
    }
    if done.len() > instances.len() || done.iter().zip(&instances).any(|(r, i)| r.id != i.id) {
        return Err(Error::config(format!(
            "{} does not follow the dataset order",
            records_path.display()
        )));
    }
    truncate(&records_path, good_len)?;
    write_json(&manifest_path, &manifest)?;

    let traces = if config.run.write_traces && params.is_some() {
        let dir = out.join(TRACES_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Some(dir)
    } else {
        None
    };
    let ctx = RunContext {
        models,
        method: config.method,
        gamma: threshold.gamma,
        estimator: threshold.estimator,
        params,
        fail_closed: params.is_none_or(|p| p.fail_closed),
        traces,
    };
    log::info!(
        "{} over {} instances at r = {} (gamma = {}), {} already done",
        ctx.method.as_str(),
        instances.len(),
        config.r,
        ctx.gamma,
        done.len()
    );

    let pool = thread_pool(config.run.workers)?;
    let start = done.len();
    let limit = match config.run.stop_after {
        Some(n) => (start + n).min(instances.len()),
        None => instances.len(),
    };
    let mut next = start;
    while next < limit {
        let end = (next + config.run.batch_size).min(limit);
        let results: Vec<Result<RunRecord>> =
            pool.install(|| instances[next..end].par_iter().map(|i| process(i, &ctx)).collect());
        let mut batch = Vec::with_capacity(results.len());
        let mut failure = None;
        for r in results {
            match r {
                Ok(rec) => batch.push(rec),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        append_records(&records_path, &batch)?;
        done.extend(batch);
        if let Some(e) = failure {
            return Err(e);
        }
        next = end;
    }

    let metrics = if done.len() == instances.len() {
        // metrics come from what is on disk, not from memory
        let (persisted, _) = read_records_resumable(&records_path)?;
        let metrics = metrics_from_records(&persisted)?;
        let doc = MetricsDocument {
            method: config.method,
            r: config.r,
            gamma: threshold.gamma,
            dataset_id: manifest.dataset_id.clone(),
            table: TableRow::new(config.method.as_str(), config.r, &metrics),
            metrics: metrics.clone(),
        };
        write_json(&out.join(METRICS_FILE), &doc)?;
        write_csv(&out.join(METRICS_CSV), std::slice::from_ref(&doc.table))?;
        done = persisted;
        Some(metrics)
    } else {
        None
    };
    Ok(RunOutcome {
        manifest,
        records: done,
        processed: next - start,
        metrics,
    })
}

// ---------------------------------------------------------------------------
// reports

pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub records: Vec<RunRecord>,
}

impl LoadedRun {
    pub fn label(&self) -> String {
        format!("{}_r{}", self.manifest.method.as_str(), self.manifest.r)
    }

    /// `(initial confidence, accuracy)` of every instance with a prediction.
    pub fn scored(&self) -> Vec<(Confidence, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.prediction.as_ref().map(|p| (p.confidence, r.accuracy)))
            .collect()
    }

    pub fn metrics(&self) -> Result<MetricsReport> {
        metrics_from_records(&self.records)
    }
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest: RunManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let (records, _) = read_records_resumable(&dir.join(RECORDS_FILE))?;
    if records.len() != manifest.n_instances {
        return Err(Error::config(format!(
            "{} is incomplete: {} of {} records",
            dir.display(),
            records.len(),
            manifest.n_instances
        )));
    }
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        records,
    })
}

/// A method's coverage and risk next to the coverage plain thresholding
/// reaches at that same risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub r: f64,
    pub coverage: f64,
    pub risk: f64,
    pub vanilla_coverage_at_risk: f64,
    pub coverage_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CurveRow {
    gamma: f64,
    coverage: f64,
    risk: f64,
}

impl From<&CurvePoint> for CurveRow {
    fn from(p: &CurvePoint) -> Self {
        Self {
            gamma: p.gamma,
            coverage: p.coverage,
            risk: p.risk,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<TableRow>,
    pub comparisons: Vec<ComparisonRow>,
}

pub const TABLE_FILE: &str = "table.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// Metric rows for every run, risk-coverage curves, and a comparison
/// against plain thresholding when a vanilla run is among them.
pub fn report_tables(runs: &[LoadedRun], out: &Path, calibration: Option<&Path>) -> Result<Report> {
    let first = runs.first().ok_or_else(|| Error::config("report needs at least one run"))?;
    for run in &runs[1..] {
        if run.manifest.dataset_id != first.manifest.dataset_id {
            return Err(Error::MixedDatasets(
                first.manifest.dataset_id.clone(),
                run.manifest.dataset_id.clone(),
            ));
        }
    }
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        let m = run.metrics()?;
        rows.push(TableRow::new(run.manifest.method.as_str(), run.manifest.r, &m));
        let scored = run.scored();
        if !scored.is_empty() {
            let curve: Vec<CurveRow> = risk_coverage_curve(&scored)?.iter().map(CurveRow::from).collect();
            write_csv(&out.join(format!("curve_{}.csv", run.label())), &curve)?;
        }
    }
    write_csv(&out.join(TABLE_FILE), &rows)?;

    let mut comparisons = Vec::new();
    for run in runs.iter().filter(|r| r.manifest.method != Method::Vanilla) {
        let vanilla = runs
            .iter()
            .filter(|v| v.manifest.method == Method::Vanilla)
            .min_by(|a, b| {
                (a.manifest.r - run.manifest.r)
                    .abs()
                    .total_cmp(&(b.manifest.r - run.manifest.r).abs())
            });
        let Some(vanilla) = vanilla else { continue };
        let m = run.metrics()?;
        let Some(risk) = m.risk else { continue };
        let scored = vanilla.scored();
        if scored.is_empty() {
            continue;
        }
        let at = coverage_at_risk(&scored, risk)?;
        comparisons.push(ComparisonRow {
            method: run.manifest.method.as_str().to_string(),
            r: run.manifest.r,
            coverage: pct(m.coverage),
            risk: pct(risk),
            vanilla_coverage_at_risk: pct(at),
            coverage_gain: pct(m.coverage - at),
        });
    }
    if !comparisons.is_empty() {
        write_csv(&out.join(COMPARISON_FILE), &comparisons)?;
    }
    if let Some(dir) = calibration {
        let outcome: CalibrationOutcome = read_json(&dir.join(CALIBRATION_REPORT_FILE))?;
        write_calibration_curve(&out.join(CALIBRATION_CURVE_FILE), &outcome)?;
    }
    Ok(Report { rows, comparisons })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CalibrationConfig;

    #[test]
    fn split_prefers_configured_sizes() {
        let cfg = CalibrationConfig::default();
        assert_eq!(split_sizes(20_000, &cfg).unwrap(), (12_000, 5_000));
        assert_eq!(split_sizes(17_000, &cfg).unwrap(), (12_000, 5_000));
        assert_eq!(split_sizes(10_001, &cfg).unwrap(), (5_000, 5_001));
        let err = split_sizes(99, &cfg).unwrap_err().to_string();
        assert!(err.contains("at least 100"), "{err}");
    }

    #[test]
    fn trace_names_are_path_safe() {
        assert_eq!(trace_file_name("test-000001"), "test-000001.json");
        assert_eq!(trace_file_name("a/b c"), "a_b_c.json");
    }

    fn sample(i: usize, ly: f64, correct: bool) -> CalibrationSample {
        CalibrationSample {
            id: format!("s{i}"),
            logit_yes: ly,
            logit_no: 0.0,
            correct,
            token_probs: None,
        }
    }

    #[test]
    fn full_tolerance_takes_lowest_confidence() {
        let samples: Vec<_> = (0..200).map(|i| sample(i, (i as f64 - 100.0) / 20.0, i % 3 != 0)).collect();
        let cfg = CalibrationConfig {
            estimator: EstimatorKind::SelfPrompt,
            ..CalibrationConfig::default()
        };
        let out = calibrate_samples(&samples, &cfg, 1.0).unwrap();
        let lowest = samples
            .iter()
            .map(|s| recoverr_core::self_prompt_confidence(&s.logits()).unwrap().value())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.threshold.gamma, lowest);
        assert_eq!(out.threshold.coverage, 1.0);
        assert_eq!(out.before, out.after);
    }
}
