use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::confidence::Confidence;

/// The declarative restatement of the question-answer pair being verified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub statement: String,
    pub source_question: String,
    pub source_answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvidenceSource {
    VisionTool { tool: String },
    Qgen { turn: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub sub_question: String,
    pub answer: String,
    pub confidence: Confidence,
    pub statement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<f64>,
    pub source: EvidenceSource,
}

/// Statement key used for duplicate detection: lowercased, whitespace collapsed.
pub fn statement_key(statement: &str) -> String {
    let mut out = String::with_capacity(statement.len());
    for word in statement.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Reliable evidence and its reliable-and-relevant subset, in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidencePools {
    pub reliable: Vec<Evidence>,
    pub relevant: Vec<Evidence>,
}

impl EvidencePools {
    pub fn contains_statement(&self, statement: &str) -> bool {
        let key = statement_key(statement);
        self.reliable
            .iter()
            .chain(&self.relevant)
            .any(|e| statement_key(&e.statement) == key)
    }

    pub fn reliable_statements(&self) -> Vec<String> {
        self.reliable.iter().map(|e| e.statement.clone()).collect()
    }

    /// Relevant statements joined by single spaces.
    pub fn premise(&self) -> String {
        let parts: Vec<&str> = self.relevant.iter().map(|e| e.statement.as_str()).collect();
        parts.join(" ")
    }

    /// Checks the pool invariants for the given bounds.
    pub fn invariants_hold(&self, confidence_bound: f64, delta_min: f64) -> bool {
        let subset = self.relevant.iter().all(|r| self.reliable.iter().any(|e| e == r));
        let reliable = self.reliable.iter().all(|e| e.confidence.value() >= confidence_bound);
        let relevant = self
            .relevant
            .iter()
            .all(|e| e.relevance.is_some_and(|d| d >= delta_min));
        let unique = |pool: &[Evidence]| {
            pool.iter().enumerate().all(|(i, e)| {
                let key = statement_key(&e.statement);
                pool[..i].iter().all(|o| statement_key(&o.statement) != key)
            })
        };
        subset && reliable && relevant && unique(&self.reliable) && unique(&self.relevant)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_ignore_case_and_spacing() {
        assert_eq!(statement_key("  The  Floor is RED. "), "the floor is red.");
    }
}
