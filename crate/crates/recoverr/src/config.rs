//! Run configuration: a TOML document whose every key can be overridden
//! with `section.key=value`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use recoverr_core::confidence::TokenAggregation;
use recoverr_core::judge::MatchMode;
use recoverr_core::recoverr::RecoverrParams;
use recoverr_core::simworld::{ConfidenceMode, FactDensity, SimVlmProfile};
use serde::{Deserialize, Serialize};

use crate::backend::BackendConfig;
use crate::error::{Error, Result};

/// Role value selecting the synthetic-world implementation.
pub const SIM: &str = "sim";
/// Negator value selecting the model-free text negation.
pub const TEXT: &str = "text";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    VisionTools,
    #[default]
    Recoverr,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::VisionTools => "vision_tools",
            Method::Recoverr => "recoverr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Test instances.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Calibration instances.
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    /// Calibration samples, Platt model and thresholds.
    #[serde(default = "default_artifacts")]
    pub artifacts: PathBuf,
    #[serde(default)]
    pub cache: Option<PathBuf>,
    /// Run directory for records, traces and metrics.
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Serialized synthetic world, needed by every `sim` role.
    #[serde(default)]
    pub world: Option<PathBuf>,
}

fn default_artifacts() -> PathBuf {
    PathBuf::from("artifacts")
}

fn default_output() -> PathBuf {
    PathBuf::from("run")
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: None,
            calibration: None,
            artifacts: default_artifacts(),
            cache: None,
            output: default_output(),
            world: None,
        }
    }
}

/// Optional replacements for the verification defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoverrOverrides {
    pub n_turns: Option<usize>,
    pub k_per_turn: Option<usize>,
    pub delta_min: Option<f64>,
    pub p_nli_min: Option<f64>,
    pub evidence_conf_bound: Option<f64>,
    pub tool_confidence: Option<f64>,
    pub filter_tool_relevance: Option<bool>,
    pub fail_closed: Option<bool>,
}

impl RecoverrOverrides {
    pub fn apply(&self, r: f64, gamma: f64) -> RecoverrParams {
        let mut p = RecoverrParams::new(r, gamma);
        if let Some(v) = self.n_turns {
            p.n_turns = v;
        }
        if let Some(v) = self.k_per_turn {
            p.k_per_turn = v;
        }
        if let Some(v) = self.delta_min {
            p.delta_min = v;
        }
        if let Some(v) = self.p_nli_min {
            p.p_nli_min = v;
        }
        if let Some(v) = self.evidence_conf_bound {
            p.evidence_conf_bound = v;
        }
        if let Some(v) = self.tool_confidence {
            p.tool_confidence = v;
        }
        if let Some(v) = self.filter_tool_relevance {
            p.filter_tool_relevance = v;
        }
        if let Some(v) = self.fail_closed {
            p.fail_closed = v;
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    Platt,
    SelfPrompt,
    TokenProduct,
    TokenMean,
    TokenFirst,
}

impl EstimatorKind {
    pub fn token_mode(self) -> Option<TokenAggregation> {
        match self {
            EstimatorKind::TokenProduct => Some(TokenAggregation::Product),
            EstimatorKind::TokenMean => Some(TokenAggregation::Mean),
            EstimatorKind::TokenFirst => Some(TokenAggregation::First),
            EstimatorKind::Platt | EstimatorKind::SelfPrompt => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default)]
    pub estimator: EstimatorKind,
    /// Platt-fit and threshold sizes used when the file holds both.
    #[serde(default = "default_fit_size")]
    pub fit_size: usize,
    #[serde(default = "default_threshold_size")]
    pub threshold_size: usize,
    /// Smallest half accepted by the 50/50 fallback split.
    #[serde(default = "default_min_split")]
    pub min_split: usize,
    #[serde(default = "default_num_bins")]
    pub num_bins: usize,
}

fn default_fit_size() -> usize {
    12_000
}

fn default_threshold_size() -> usize {
    5_000
}

fn default_min_split() -> usize {
    50
}

fn default_num_bins() -> usize {
    recoverr_core::confidence::DEFAULT_NUM_BINS
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::default(),
            fit_size: default_fit_size(),
            threshold_size: default_threshold_size(),
            min_split: default_min_split(),
            num_bins: default_num_bins(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    #[default]
    Exact,
    Soft,
    LlmJudge,
}

impl JudgeMode {
    pub fn match_mode(self) -> Option<MatchMode> {
        match self {
            JudgeMode::Exact => Some(MatchMode::Exact),
            JudgeMode::Soft => Some(MatchMode::Soft),
            JudgeMode::LlmJudge => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeConfig {
    #[serde(default)]
    pub mode: JudgeMode,
    /// Backend for `llm_judge`.
    #[serde(default)]
    pub backend: Option<String>,
}

/// Which implementation serves each role: `sim` or a backend name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    #[serde(default = "sim")]
    pub vlm: String,
    #[serde(default = "sim")]
    pub qgen: String,
    #[serde(default = "sim")]
    pub paraphrase: String,
    #[serde(default = "sim")]
    pub nli: String,
    /// `sim` or `text`.
    #[serde(default = "sim")]
    pub negator: String,
    /// `sim_caption` or backend names serving captions.
    #[serde(default)]
    pub tools: Vec<String>,
    #[serde(default = "default_qgen_temperature")]
    pub qgen_temperature: f64,
    #[serde(default = "default_max_answer_tokens")]
    pub max_answer_tokens: u32,
}

fn sim() -> String {
    SIM.to_string()
}

fn default_qgen_temperature() -> f64 {
    1.0
}

fn default_max_answer_tokens() -> u32 {
    10
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            vlm: sim(),
            qgen: sim(),
            paraphrase: sim(),
            nli: sim(),
            negator: sim(),
            tools: Vec::new(),
            qgen_temperature: default_qgen_temperature(),
            max_answer_tokens: default_max_answer_tokens(),
        }
    }
}

impl ModelsConfig {
    pub fn uses_sim(&self) -> bool {
        [&self.vlm, &self.qgen, &self.paraphrase, &self.nli, &self.negator]
            .iter()
            .any(|r| r.as_str() == SIM)
            || self.tools.iter().any(|t| t == SIM_CAPTION)
    }
}

pub const SIM_CAPTION: &str = "sim_caption";

/// Simulated model settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "uniform")]
    pub base: FactDensity,
    #[serde(default = "uniform")]
    pub derived: FactDensity,
    #[serde(default = "calibrated")]
    pub confidence_mode: ConfidenceMode,
    #[serde(default = "default_reveal")]
    pub caption_reveal_fraction: f64,
    #[serde(default = "default_caption_accuracy")]
    pub caption_accuracy: f64,
    /// Replaces the distractor ratio stored with the world.
    #[serde(default)]
    pub distractor_ratio: Option<f64>,
}

fn uniform() -> FactDensity {
    FactDensity::UNIFORM
}

fn calibrated() -> ConfidenceMode {
    ConfidenceMode::Calibrated
}

fn default_reveal() -> f64 {
    0.3
}

fn default_caption_accuracy() -> f64 {
    0.95
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            base: uniform(),
            derived: uniform(),
            confidence_mode: calibrated(),
            caption_reveal_fraction: default_reveal(),
            caption_accuracy: default_caption_accuracy(),
            distractor_ratio: None,
        }
    }
}

impl SimConfig {
    pub fn profile(&self, seed: u64) -> SimVlmProfile {
        SimVlmProfile {
            base: self.base,
            derived: self.derived,
            confidence_mode: self.confidence_mode,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub vlm: u64,
    #[serde(default = "one")]
    pub qgen: u64,
    #[serde(default = "two")]
    pub tool: u64,
}

fn one() -> u64 {
    1
}

fn two() -> u64 {
    2
}

impl Default for Seeds {
    fn default() -> Self {
        Self { vlm: 0, qgen: 1, tool: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    /// Instances dispatched per batch; records are appended after each batch.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Worker threads; 0 uses one per core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "yes")]
    pub write_traces: bool,
    /// Stop after this many new instances, leaving the run resumable.
    #[serde(default)]
    pub stop_after: Option<usize>,
}

fn default_batch() -> usize {
    64
}

fn yes() -> bool {
    true
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            workers: 0,
            write_traces: true,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub recoverr: RecoverrOverrides,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub judge: JudgeConfig,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub run: RunOptions,
}

fn default_r() -> f64 {
    0.2
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::Table::new().try_into().expect("every field has a default")
    }
}

impl RunConfig {
    /// Reads `path` (if any) and applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = table.try_into().map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::config(format!("r = {} outside [0, 1]", self.r)));
        }
        let m = &self.models;
        for (role, name) in [
            ("vlm", &m.vlm),
            ("qgen", &m.qgen),
            ("paraphrase", &m.paraphrase),
            ("nli", &m.nli),
        ] {
            if name != SIM && !self.backends.contains_key(name) {
                return Err(Error::config(format!("models.{role} = {name:?} names no backend")));
            }
        }
        if m.negator != SIM && m.negator != TEXT {
            return Err(Error::config(format!("models.negator must be {SIM:?} or {TEXT:?}")));
        }
        for t in &m.tools {
            if t != SIM_CAPTION && !self.backends.contains_key(t) {
                return Err(Error::config(format!("models.tools entry {t:?} names no backend")));
            }
        }
        if self.judge.mode == JudgeMode::LlmJudge {
            match &self.judge.backend {
                Some(b) if self.backends.contains_key(b) => {}
                _ => return Err(Error::config("judge.mode = llm_judge needs judge.backend naming a backend")),
            }
        }
        if self.run.batch_size == 0 {
            return Err(Error::config("run.batch_size must be at least 1"));
        }
        if m.uses_sim() && self.paths.world.is_none() {
            return Err(Error::config("sim roles need paths.world"));
        }
        self.recoverr.apply(self.r, 0.5).validate()?;
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c=value`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = RunConfig::load(None, &sets(&["paths.world=w.json"])).unwrap();
        let p = c.recoverr.apply(c.r, 0.9);
        assert_eq!((p.n_turns, p.k_per_turn), (10, 10));
        assert_eq!((p.delta_min, p.p_nli_min), (0.2, 0.9));
        assert_eq!(p.evidence_conf_bound, 0.8);
        assert_eq!(c.models.qgen_temperature, 1.0);
        assert_eq!((c.calibration.fit_size, c.calibration.threshold_size), (12_000, 5_000));
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "r = 0.1\nmethod = \"vanilla\"\n[paths]\nworld = \"w.json\"\n[sim.base]\naccuracy = 0.9\nconcentration = 2.0\n",
        )
        .unwrap();
        let c = RunConfig::load(
            Some(&path),
            &sets(&[
                "r=0.2",
                "recoverr.delta_min=0",
                "sim.base.accuracy=0.95",
                "sim.confidence_mode.mode=distorted",
                "sim.confidence_mode.temperature=3.0",
                "paths.output=out dir",
                "method=recoverr",
            ]),
        )
        .unwrap();
        assert_eq!(c.r, 0.2);
        assert_eq!(c.method, Method::Recoverr);
        assert_eq!(c.recoverr.delta_min, Some(0.0));
        assert_eq!(c.sim.base.accuracy, 0.95);
        assert_eq!(c.sim.confidence_mode, ConfidenceMode::Distorted { temperature: 3.0 });
        assert_eq!(c.paths.output, PathBuf::from("out dir"));
    }

    #[test]
    fn config_errors() {
        let w = "paths.world=w";
        assert!(RunConfig::load(None, &sets(&[w, "r=1.5"])).is_err());
        assert!(RunConfig::load(None, &sets(&[w, "judge.mode=lave"])).is_err());
        assert!(RunConfig::load(None, &sets(&[w, "judge.mode=llm_judge"])).is_err());
        assert!(RunConfig::load(None, &sets(&[w, "models.nli=gpt"])).is_err());
        assert!(RunConfig::load(None, &sets(&[w, "unknown_key=1"])).is_err());
        assert!(RunConfig::load(None, &sets(&["r=0.2"])).is_err());
        assert!(RunConfig::load(None, &sets(&[w, "no-equals"])).is_err());
        assert!(RunConfig::load(None, &sets(&[w, "recoverr.k_per_turn=0"])).is_err());
    }

    #[test]
    fn backend_section_parses() {
        let c = RunConfig::load(
            None,
            &sets(&[
                "backends.local.base_url=http://127.0.0.1:8000/v1",
                "backends.local.model=llava",
                "backends.local.multimodal=true",
                "models.vlm=local",
                "models.qgen=local",
                "models.paraphrase=local",
                "models.nli=local",
                "models.negator=text",
            ]),
        )
        .unwrap();
        let b = &c.backends["local"];
        assert!(b.multimodal);
        assert_eq!(b.max_retries, 3);
        assert!(!c.models.uses_sim());
    }
}
