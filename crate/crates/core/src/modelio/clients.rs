use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::confidence::VerificationLogits;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientErrorKind {
    /// Network failure or timeout after retries.
    Transport,
    /// The backend cannot provide what was asked (e.g. log-probabilities).
    Capability,
    /// The reply could not be interpreted.
    Malformed,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientError {
    pub kind: ClientErrorKind,
    pub message: String,
}

impl ClientError {
    pub fn new(kind: ClientErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn transport(message: impl Into<String>) -> Self {
        Self::new(ClientErrorKind::Transport, message)
    }

    pub fn capability(message: impl Into<String>) -> Self {
        Self::new(ClientErrorKind::Capability, message)
    }

    pub fn malformed(message: impl Into<String>) -> Self {
        Self::new(ClientErrorKind::Malformed, message)
    }
}

impl fmt::Display for ClientError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ClientErrorKind::Transport => "transport",
            ClientErrorKind::Capability => "capability",
            ClientErrorKind::Malformed => "malformed reply",
            ClientErrorKind::Other => "client",
        };
        write!(f, "{kind} error: {}", self.message)
    }
}

impl core::error::Error for ClientError {}

/// A model answer before any confidence estimate is attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAnswer {
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<VerificationLogits>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_probs: Option<Vec<f64>>,
}

pub trait VisionLanguageModel: Send + Sync {
    /// Answers `question` about `image` and reports the yes/no verification
    /// logits of that answer when the backend can.
    fn answer(&self, image: &str, question: &str) -> Result<RawAnswer, ClientError>;
}

/// Everything a question generator may condition on.
#[derive(Debug, Clone, Copy)]
pub struct QgenRequest<'a> {
    pub image: &'a str,
    pub question: &'a str,
    pub answer: &'a str,
    /// Statements of the reliable evidence collected so far.
    pub evidences: &'a [String],
    /// Every sub-question already asked in this run.
    pub asked: &'a [String],
    pub k: usize,
    /// 1-based turn number.
    pub turn: usize,
    /// The rendered question-generation prompt.
    pub prompt: &'a str,
}

pub trait QuestionGenerator: Send + Sync {
    /// Returns the raw generator output; the caller parses sub-questions.
    fn generate(&self, request: &QgenRequest<'_>) -> Result<String, ClientError>;
}

pub trait Paraphraser: Send + Sync {
    /// Restates a question-answer pair as one declarative sentence.
    fn paraphrase(&self, question: &str, answer: &str) -> Result<String, ClientError>;
}

pub trait EntailmentModel: Send + Sync {
    /// Probability that `premise` entails `hypothesis`.
    fn entailment(&self, premise: &str, hypothesis: &str) -> Result<f64, ClientError>;
}

pub trait Negator: Send + Sync {
    fn negate(&self, statement: &str) -> Result<String, ClientError>;
}

pub trait VisionTool: Send + Sync {
    fn name(&self) -> &str;

    /// Textual statements about the image.
    fn describe(&self, image: &str) -> Result<Vec<String>, ClientError>;
}

/// Model-free negation: `It is not the case that <statement>`, with the
/// statement's first letter lowercased.
#[derive(Debug, Clone, Copy, Default)]
pub struct TextNegator;

impl TextNegator {
    pub const PREFIX: &'static str = "It is not the case that ";
}

impl Negator for TextNegator {
    fn negate(&self, statement: &str) -> Result<String, ClientError> {
        let statement = statement.trim();
        let mut out = String::with_capacity(Self::PREFIX.len() + statement.len());
        out.push_str(Self::PREFIX);
        let mut chars = statement.chars();
        if let Some(first) = chars.next() {
            out.extend(first.to_lowercase());
            out.push_str(chars.as_str());
        }
        Ok(out)
    }
}
