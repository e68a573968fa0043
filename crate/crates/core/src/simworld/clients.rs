use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nli::{exact_negate, exact_nli};
use super::schema::{parse_question, parse_statement, parse_world_ref, question_for, AttributeKind, Assertion};
use super::SimDataset;
use crate::math::derive_seed;
use crate::modelio::{ClientError, EntailmentModel, Negator, Paraphraser, QgenRequest, QuestionGenerator, VisionTool};

/// Whether slot `i` of the question bank holds a distractor.
pub fn is_distractor_slot(i: usize, ratio: f64) -> bool {
    let f = |x: usize| libm::floor(x as f64 * ratio);
    f(i + 1) > f(i)
}

/// Enumerating question generator.
///
/// The bank for a target lists the questions about the observable sources
/// of the target's rule, with distractor questions at the slots selected by
/// the distractor ratio. Each call returns the first `k` bank questions not
/// yet asked and not about an attribute already covered by the evidence.
#[derive(Debug, Clone)]
pub struct SimQgen {
    pub dataset: Arc<SimDataset>,
    pub distractor_ratio: f64,
    pub seed: u64,
}

impl SimQgen {
    pub fn new(dataset: Arc<SimDataset>, distractor_ratio: f64, seed: u64) -> Self {
        Self {
            dataset,
            distractor_ratio: distractor_ratio.clamp(0.0, 0.95),
            seed,
        }
    }

    /// Attribute names in bank order for `target` in `image`.
    pub fn bank(&self, image: &str, target: &str) -> Vec<String> {
        let schema = &self.dataset.schema;
        let relevant: Vec<String> = schema
            .observable_sources(target)
            .into_iter()
            .map(|i| schema.attributes[i].name.clone())
            .filter(|n| n != target)
            .collect();
        let mut distractors: Vec<String> = schema
            .attributes
            .iter()
            .filter(|a| a.kind == AttributeKind::Distractor)
            .map(|a| a.name.clone())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &["distractors", image, target]));
        distractors.shuffle(&mut rng);
        let mut relevant = relevant.into_iter();
        let mut distractors = distractors.into_iter();
        let mut bank = Vec::new();
        let mut remaining = relevant.len();
        for slot in 0.. {
            if is_distractor_slot(slot, self.distractor_ratio) {
                if let Some(d) = distractors.next() {
                    bank.push(d);
                }
            } else if remaining > 0 {
                bank.push(relevant.next().expect("counted"));
                remaining -= 1;
            } else {
                break;
            }
        }
        bank
    }
}

impl QuestionGenerator for SimQgen {
    fn generate(&self, request: &QgenRequest<'_>) -> Result<String, ClientError> {
        let Some(target) = parse_question(request.question) else {
            return Ok(String::new());
        };
        let known: Vec<String> = request
            .evidences
            .iter()
            .filter_map(|e| parse_statement(e))
            .map(|a| a.attribute)
            .collect();
        let lines: Vec<String> = self
            .bank(request.image, target)
            .into_iter()
            .filter(|attr| !known.contains(attr))
            .map(|attr| question_for(&attr))
            .filter(|q| !request.asked.contains(q))
            .take(request.k)
            .enumerate()
            .map(|(i, q)| format!("{}. {q}", i + 1))
            .collect();
        Ok(lines.join("\n"))
    }
}

/// Restates "What is the value of a?" with answer v as "a = v.".
#[derive(Debug, Clone, Copy, Default)]
pub struct SimParaphraser;

impl Paraphraser for SimParaphraser {
    fn paraphrase(&self, question: &str, answer: &str) -> Result<String, ClientError> {
        let answer = answer.trim();
        Ok(match parse_question(question) {
            Some(attr) if !answer.is_empty() => Assertion::eq(attr, answer).to_string(),
            _ => String::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimNegator;

impl Negator for SimNegator {
    fn negate(&self, statement: &str) -> Result<String, ClientError> {
        exact_negate(statement).map_err(|e| ClientError::malformed(e.to_string()))
    }
}

/// Entailment by exhaustive enumeration over the dataset schema.
#[derive(Debug, Clone)]
pub struct SimNli {
    pub dataset: Arc<SimDataset>,
}

impl EntailmentModel for SimNli {
    fn entailment(&self, premise: &str, hypothesis: &str) -> Result<f64, ClientError> {
        Ok(exact_nli(&self.dataset.schema, premise, hypothesis))
    }
}

/// Caption-like tool revealing a seeded subset of observable facts, each
/// reported correctly with probability `accuracy`.
#[derive(Debug, Clone)]
pub struct SimCaptionTool {
    pub dataset: Arc<SimDataset>,
    pub reveal_fraction: f64,
    pub accuracy: f64,
    pub seed: u64,
}

impl VisionTool for SimCaptionTool {
    fn name(&self) -> &str {
        "sim_caption"
    }

    fn describe(&self, image: &str) -> Result<Vec<String>, ClientError> {
        let world = parse_world_ref(image)
            .and_then(|i| self.dataset.worlds.get(i))
            .ok_or_else(|| ClientError::malformed(format!("unknown synthetic world {image:?}")))?;
        let schema = &self.dataset.schema;
        let assignment = world
            .assignment(schema)
            .map_err(|e| ClientError::malformed(e.to_string()))?;
        let mut out = Vec::new();
        for (i, a) in schema.attributes.iter().enumerate() {
            if !a.kind.is_observable() {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &["caption", image, &a.name]));
            if rng.random::<f64>() >= self.reveal_fraction {
                continue;
            }
            let truth = assignment[i];
            let n = a.domain.len();
            let index = if n == 1 || rng.random::<f64>() < self.accuracy {
                truth
            } else {
                let k = rng.random_range(0..n - 1);
                if k >= truth {
                    k + 1
                } else {
                    k
                }
            };
            out.push(Assertion::eq(a.name.clone(), a.domain[index].clone()).to_string());
        }
        Ok(out)
    }
}
