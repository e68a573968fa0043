//! Answer accuracy against a list of gold answers.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model-free scoring modes. Model-graded judging lives with the backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// 1 if the normalized prediction equals any normalized gold answer.
    Exact,
    /// Best token-overlap F1 against the gold answers.
    Soft,
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercases, drops punctuation and articles, collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    // "U.K." and "uk" should agree, so single letters split by dots are rejoined
    let dotted: String = text
        .chars()
        .filter(|c| *c != '.')
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    let source = if text.contains('.') && !text.contains(". ") { dotted } else { cleaned };
    let words: Vec<&str> = source
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect();
    words.join(" ")
}

fn token_f1(pred: &str, gold: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut remaining = g.clone();
    let mut common = 0usize;
    for tok in &p {
        if let Some(i) = remaining.iter().position(|t| t == tok) {
            remaining.swap_remove(i);
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn judge_accuracy(predicted: &str, gold_answers: &[String], mode: MatchMode) -> Result<f64> {
    if gold_answers.is_empty() {
        return Err(Error::invalid("no gold answers"));
    }
    let pred = normalize_answer(predicted);
    let score = match mode {
        MatchMode::Exact => {
            if gold_answers.iter().any(|g| normalize_answer(g) == pred) {
                1.0
            } else {
                0.0
            }
        }
        MatchMode::Soft => gold_answers
            .iter()
            .map(|g| token_f1(&pred, &normalize_answer(g)))
            .fold(0.0, f64::max),
    };
    Ok(score)
}
