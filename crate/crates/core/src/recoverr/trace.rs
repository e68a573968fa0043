use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Evidence, Hypothesis, RecoverrParams};
use crate::modelio::ClientError;

/// Client calls issued during one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub vlm: usize,
    pub qgen: usize,
    pub paraphrase: usize,
    pub nli: usize,
    pub negate: usize,
    pub tool: usize,
}

impl CallCounts {
    pub fn total(&self) -> usize {
        self.vlm + self.qgen + self.paraphrase + self.nli + self.negate + self.tool
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceCheck {
    pub negated: String,
    pub p_given_statement: f64,
    pub p_given_negation: f64,
    pub relevance: f64,
}

/// One candidate evidence and every verdict reached about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceCheck {
    pub evidence: Evidence,
    pub duplicate: bool,
    pub reliable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<RelevanceCheck>,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyCheck {
    pub premise: String,
    pub probability: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: usize,
    pub qgen_prompt: String,
    pub qgen_raw: String,
    pub questions: Vec<String>,
    pub evidence: Vec<EvidenceCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sufficiency: Option<SufficiencyCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolFailure {
    pub tool: String,
    pub error: ClientError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    AnsweredThreshold,
    AnsweredRecovered,
    Abstained,
    FailedClosed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    pub kind: TerminalKind,
    /// Turn of exit; 0 when the loop never started.
    pub turn: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ClientError>,
}

/// Audit record of one verification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverrTrace {
    pub instance_id: String,
    pub image: String,
    pub question: String,
    pub initial_answer: String,
    pub initial_confidence: f64,
    pub params: RecoverrParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<Hypothesis>,
    #[serde(default)]
    pub tool_evidence: Vec<EvidenceCheck>,
    #[serde(default)]
    pub tool_failures: Vec<ToolFailure>,
    /// Present only when evidence collection is disabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_sufficiency: Option<SufficiencyCheck>,
    #[serde(default)]
    pub turns: Vec<TurnRecord>,
    pub terminal: Terminal,
    pub calls: CallCounts,
}
