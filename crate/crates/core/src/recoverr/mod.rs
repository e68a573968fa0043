//! Recovering abstentions by verifying low-confidence answers with evidence.
//!
//! A prediction below the selective threshold is restated as a hypothesis.
//! Sub-questions about the image are generated and answered, each answer is
//! restated as an evidence statement, and the evidence that is both reliable
//! (confident) and relevant (shifts entailment of the hypothesis) is pooled
//! into a premise. The original answer is kept if the premise entails the
//! hypothesis strongly enough; otherwise the system abstains after `n_turns`.

mod evidence;
mod trace;

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use evidence::{statement_key, Evidence, EvidencePools, EvidenceSource, Hypothesis};
pub use trace::{
    CallCounts, EvidenceCheck, RecoverrTrace, RelevanceCheck, SufficiencyCheck, Terminal, TerminalKind, ToolFailure,
    TurnRecord,
};

use crate::confidence::{Confidence, ConfidenceEstimator};
use crate::error::{Error, Result};
use crate::modelio::{
    parse_subquestions, render_qgen, ClientError, EntailmentModel, Negator, Paraphraser, QgenRequest,
    QuestionGenerator, VisionLanguageModel, VisionTool,
};
use crate::selective::{decide, Instance, Prediction, Provenance, SelectiveOutcome};

pub const DEFAULT_N_TURNS: usize = 10;
pub const DEFAULT_K_PER_TURN: usize = 10;
pub const DEFAULT_DELTA_MIN: f64 = 0.2;
pub const DEFAULT_P_NLI_MIN: f64 = 0.9;
pub const DEFAULT_TOOL_CONFIDENCE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoverrParams {
    pub r: f64,
    pub gamma: f64,
    /// 0 disables evidence collection: tool evidence and one sufficiency check.
    pub n_turns: usize,
    pub k_per_turn: usize,
    pub delta_min: f64,
    /// Values above 1 disable recovery entirely.
    pub p_nli_min: f64,
    pub evidence_conf_bound: f64,
    /// Confidence assigned to statements returned by vision tools.
    pub tool_confidence: f64,
    pub filter_tool_relevance: bool,
    /// Abstain on client errors instead of returning them.
    pub fail_closed: bool,
}

impl RecoverrParams {
    /// Defaults for risk tolerance `r`; the evidence bound is `1 - r`.
    pub fn new(r: f64, gamma: f64) -> Self {
        Self {
            r,
            gamma,
            n_turns: DEFAULT_N_TURNS,
            k_per_turn: DEFAULT_K_PER_TURN,
            delta_min: DEFAULT_DELTA_MIN,
            p_nli_min: DEFAULT_P_NLI_MIN,
            evidence_conf_bound: 1.0 - r,
            tool_confidence: DEFAULT_TOOL_CONFIDENCE,
            filter_tool_relevance: true,
            fail_closed: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("r", self.r)?;
        unit("evidence_conf_bound", self.evidence_conf_bound)?;
        unit("tool_confidence", self.tool_confidence)?;
        if self.gamma.is_nan() {
            return Err(Error::invalid("gamma is NaN"));
        }
        if self.k_per_turn == 0 {
            return Err(Error::invalid("k_per_turn must be at least 1"));
        }
        if self.delta_min.is_nan() || self.delta_min < 0.0 {
            return Err(Error::invalid(format!("delta_min = {} must be non-negative", self.delta_min)));
        }
        if self.p_nli_min.is_nan() || self.p_nli_min < 0.0 {
            return Err(Error::invalid(format!("p_nli_min = {} must be non-negative", self.p_nli_min)));
        }
        Ok(())
    }
}

/// The models one verification run talks to.
pub struct Clients<'a> {
    pub vlm: &'a dyn VisionLanguageModel,
    /// Turns sub-answer logits into confidences.
    pub estimator: ConfidenceEstimator,
    pub qgen: &'a dyn QuestionGenerator,
    pub paraphraser: &'a dyn Paraphraser,
    pub nli: &'a dyn EntailmentModel,
    pub negator: &'a dyn Negator,
    pub tools: &'a [Box<dyn VisionTool>],
}

fn fallback_hypothesis(question: &str, answer: &str) -> String {
    format!("The answer to '{question}' is {answer}.")
}

pub fn make_hypothesis(question: &str, answer: &str, paraphraser: &dyn Paraphraser) -> Result<Hypothesis, ClientError> {
    let raw = paraphraser.paraphrase(question, answer)?;
    let trimmed = raw.trim();
    let statement = if trimmed.is_empty() || trimmed.ends_with('?') {
        fallback_hypothesis(question, answer)
    } else {
        trimmed.to_string()
    };
    Ok(Hypothesis {
        statement,
        source_question: question.to_string(),
        source_answer: answer.to_string(),
    })
}

pub fn check_reliability(evidence: &Evidence, bound: f64) -> bool {
    evidence.confidence.value() >= bound
}

fn clamp_probability(p: f64) -> Result<f64, ClientError> {
    if p.is_nan() {
        Err(ClientError::malformed("entailment probability is NaN"))
    } else {
        Ok(p.clamp(0.0, 1.0))
    }
}

/// `|P(H | S) - P(H | not S)|`.
pub fn relevance(
    statement: &str,
    hypothesis: &Hypothesis,
    nli: &dyn EntailmentModel,
    negator: &dyn Negator,
    calls: &mut CallCounts,
) -> Result<RelevanceCheck, ClientError> {
    calls.negate += 1;
    let negated = negator.negate(statement)?;
    calls.nli += 1;
    let p_given_statement = clamp_probability(nli.entailment(statement, &hypothesis.statement)?)?;
    calls.nli += 1;
    let p_given_negation = clamp_probability(nli.entailment(&negated, &hypothesis.statement)?)?;
    Ok(RelevanceCheck {
        negated,
        p_given_statement,
        p_given_negation,
        relevance: (p_given_statement - p_given_negation).abs(),
    })
}

/// Entailment of the hypothesis by the relevant pool joined into one premise.
/// An empty pool yields 0 without consulting the model.
pub fn sufficiency(
    relevant: &[Evidence],
    hypothesis: &Hypothesis,
    nli: &dyn EntailmentModel,
    calls: &mut CallCounts,
) -> Result<(String, f64), ClientError> {
    if relevant.is_empty() {
        return Ok((String::new(), 0.0));
    }
    let premise = relevant
        .iter()
        .map(|e| e.statement.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    calls.nli += 1;
    let p = clamp_probability(nli.entailment(&premise, &hypothesis.statement)?)?;
    Ok((premise, p))
}

/// Runs reliability and relevance checks and admits the evidence to the pools.
fn admit(
    evidence: Evidence,
    check_relevance: bool,
    hypothesis: &Hypothesis,
    params: &RecoverrParams,
    clients: (&dyn EntailmentModel, &dyn Negator),
    pools: &mut EvidencePools,
    calls: &mut CallCounts,
) -> Result<EvidenceCheck, ClientError> {
    let mut check = EvidenceCheck {
        evidence,
        duplicate: false,
        reliable: false,
        relevance: None,
        relevant: false,
    };
    if pools.contains_statement(&check.evidence.statement) {
        check.duplicate = true;
        return Ok(check);
    }
    check.reliable = check_reliability(&check.evidence, params.evidence_conf_bound);
    if !check.reliable {
        return Ok(check);
    }
    if check_relevance {
        let rel = relevance(&check.evidence.statement, hypothesis, clients.0, clients.1, calls)?;
        check.evidence.relevance = Some(rel.relevance);
        check.relevant = rel.relevance >= params.delta_min;
        check.relevance = Some(rel);
    } else {
        check.relevant = true;
    }
    pools.reliable.push(check.evidence.clone());
    if check.relevant {
        pools.relevant.push(check.evidence.clone());
    }
    Ok(check)
}

/// Result of querying the vision tools.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToolEvidence {
    pub pools: EvidencePools,
    pub checks: Vec<EvidenceCheck>,
    pub failures: Vec<ToolFailure>,
}

pub fn init_image_evidences(
    image: &str,
    tools: &[Box<dyn VisionTool>],
    hypothesis: &Hypothesis,
    nli: &dyn EntailmentModel,
    negator: &dyn Negator,
    params: &RecoverrParams,
    calls: &mut CallCounts,
) -> Result<ToolEvidence, ClientError> {
    let mut out = ToolEvidence::default();
    for tool in tools {
        calls.tool += 1;
        let statements = match tool.describe(image) {
            Ok(s) => s,
            Err(error) => {
                log::warn!("vision tool {} failed on {image}: {error}", tool.name());
                out.failures.push(ToolFailure {
                    tool: tool.name().to_string(),
                    error,
                });
                continue;
            }
        };
        for statement in statements {
            let statement = statement.trim().to_string();
            if statement.is_empty() {
                continue;
            }
            let evidence = Evidence {
                sub_question: String::new(),
                answer: String::new(),
                confidence: Confidence::saturating(params.tool_confidence),
                statement,
                relevance: None,
                source: EvidenceSource::VisionTool {
                    tool: tool.name().to_string(),
                },
            };
            let check = admit(
                evidence,
                params.filter_tool_relevance,
                hypothesis,
                params,
                (nli, negator),
                &mut out.pools,
                calls,
            )?;
            out.checks.push(check);
        }
    }
    Ok(out)
}

/// Questions, raw output, and evidence of one collection step.
#[derive(Debug, Clone, PartialEq)]
pub struct Collected {
    pub prompt: String,
    pub raw: String,
    pub questions: Vec<String>,
    /// New evidence in question order, duplicates removed.
    pub evidence: Vec<Evidence>,
    /// Evidence dropped because its statement was already known.
    pub duplicates: Vec<Evidence>,
}

#[allow(clippy::too_many_arguments)]
pub fn collect_k_evidences(
    image: &str,
    hypothesis: &Hypothesis,
    pools: &EvidencePools,
    asked: &[String],
    clients: &Clients<'_>,
    k: usize,
    turn: usize,
    calls: &mut CallCounts,
) -> Result<Collected, ClientError> {
    let known = pools.reliable_statements();
    let prompt = render_qgen(&hypothesis.source_question, &hypothesis.source_answer, &known, k);
    let request = QgenRequest {
        image,
        question: &hypothesis.source_question,
        answer: &hypothesis.source_answer,
        evidences: &known,
        asked,
        k,
        turn,
        prompt: &prompt,
    };
    calls.qgen += 1;
    let raw = clients.qgen.generate(&request)?;
    let questions = parse_subquestions(&raw, k);
    if questions.len() < k {
        log::debug!("turn {turn}: generator produced {} of {k} sub-questions", questions.len());
    }
    let mut evidence: Vec<Evidence> = Vec::with_capacity(questions.len());
    let mut duplicates = Vec::new();
    for q in &questions {
        calls.vlm += 1;
        let reply = clients.vlm.answer(image, q)?;
        let confidence = clients
            .estimator
            .estimate(reply.logits.as_ref(), reply.token_probs.as_deref())
            .map_err(|e| ClientError::capability(format!("{e}")))?;
        calls.paraphrase += 1;
        let statement = clients.paraphraser.paraphrase(q, &reply.answer)?.trim().to_string();
        if statement.is_empty() {
            log::debug!("turn {turn}: empty statement for sub-question {q:?}");
            continue;
        }
        let e = Evidence {
            sub_question: q.clone(),
            answer: reply.answer,
            confidence,
            statement,
            relevance: None,
            source: EvidenceSource::Qgen { turn },
        };
        let key = statement_key(&e.statement);
        if pools.contains_statement(&e.statement) || evidence.iter().any(|o| statement_key(&o.statement) == key) {
            duplicates.push(e);
        } else {
            evidence.push(e);
        }
    }
    Ok(Collected {
        prompt,
        raw,
        questions,
        evidence,
        duplicates,
    })
}

/// Verifies `prediction` for `instance`.
///
/// Answers at once when the confidence clears `gamma`. Client failures end
/// the run with an abstention recorded in the trace unless `fail_closed` is
/// off, in which case they are returned.
pub fn run(
    instance: &Instance,
    prediction: &Prediction,
    params: &RecoverrParams,
    clients: &Clients<'_>,
) -> Result<(SelectiveOutcome, RecoverrTrace)> {
    params.validate()?;
    let mut trace = RecoverrTrace {
        instance_id: instance.id.clone(),
        image: instance.image_ref.clone(),
        question: instance.question.clone(),
        initial_answer: prediction.answer.clone(),
        initial_confidence: prediction.confidence.value(),
        params: *params,
        hypothesis: None,
        tool_evidence: Vec::new(),
        tool_failures: Vec::new(),
        tool_sufficiency: None,
        turns: Vec::new(),
        terminal: Terminal {
            kind: TerminalKind::Abstained,
            turn: 0,
            error: None,
        },
        calls: CallCounts::default(),
    };
    if decide(prediction.confidence, params.gamma) {
        trace.terminal.kind = TerminalKind::AnsweredThreshold;
        return Ok((
            SelectiveOutcome::answered(prediction.answer.clone(), Provenance::Threshold),
            trace,
        ));
    }
    let mut calls = CallCounts::default();
    let verdict = verify(instance, prediction, params, clients, &mut trace, &mut calls);
    trace.calls = calls;
    match verdict {
        Ok(true) => {
            trace.terminal.kind = TerminalKind::AnsweredRecovered;
            let provenance = if params.n_turns == 0 {
                Provenance::BaselineTools
            } else {
                Provenance::Recovered
            };
            Ok((SelectiveOutcome::answered(prediction.answer.clone(), provenance), trace))
        }
        Ok(false) => {
            trace.terminal.kind = TerminalKind::Abstained;
            Ok((SelectiveOutcome::abstained(), trace))
        }
        Err(error) if params.fail_closed => {
            log::warn!("instance {}: abstaining after client error: {error}", instance.id);
            trace.terminal.kind = TerminalKind::FailedClosed;
            trace.terminal.error = Some(error);
            Ok((SelectiveOutcome::abstained(), trace))
        }
        Err(error) => Err(error.into()),
    }
}

/// The loop body; returns whether the hypothesis was verified.
fn verify(
    instance: &Instance,
    prediction: &Prediction,
    params: &RecoverrParams,
    clients: &Clients<'_>,
    trace: &mut RecoverrTrace,
    calls: &mut CallCounts,
) -> Result<bool, ClientError> {
    let image = instance.image_ref.as_str();
    calls.paraphrase += 1;
    let hypothesis = make_hypothesis(&instance.question, &prediction.answer, clients.paraphraser)?;
    trace.hypothesis = Some(hypothesis.clone());

    let tools = init_image_evidences(
        image,
        clients.tools,
        &hypothesis,
        clients.nli,
        clients.negator,
        params,
        calls,
    )?;
    trace.tool_evidence = tools.checks;
    trace.tool_failures = tools.failures;
    let mut pools = tools.pools;

    if params.n_turns == 0 {
        let (premise, probability) = sufficiency(&pools.relevant, &hypothesis, clients.nli, calls)?;
        let satisfied = probability >= params.p_nli_min;
        trace.tool_sufficiency = Some(SufficiencyCheck {
            premise,
            probability,
            satisfied,
        });
        return Ok(satisfied);
    }

    let mut asked: Vec<String> = Vec::new();
    for turn in 1..=params.n_turns {
        trace.terminal.turn = turn;
        let collected = collect_k_evidences(
            image,
            &hypothesis,
            &pools,
            &asked,
            clients,
            params.k_per_turn,
            turn,
            calls,
        )?;
        asked.extend(collected.questions.iter().cloned());
        let mut record = TurnRecord {
            turn,
            qgen_prompt: collected.prompt,
            qgen_raw: collected.raw,
            questions: collected.questions,
            evidence: Vec::with_capacity(collected.evidence.len() + collected.duplicates.len()),
            sufficiency: None,
        };
        record.evidence.extend(collected.duplicates.into_iter().map(|evidence| EvidenceCheck {
            evidence,
            duplicate: true,
            reliable: false,
            relevance: None,
            relevant: false,
        }));
        let mut failure = None;
        for e in collected.evidence {
            match admit(
                e,
                true,
                &hypothesis,
                params,
                (clients.nli, clients.negator),
                &mut pools,
                calls,
            ) {
                Ok(check) => record.evidence.push(check),
                Err(err) => {
                    failure = Some(err);
                    break;
                }
            }
        }
        if let Some(err) = failure {
            trace.turns.push(record);
            return Err(err);
        }
        let checked = sufficiency(&pools.relevant, &hypothesis, clients.nli, calls);
        let (premise, probability) = match checked {
            Ok(v) => v,
            Err(err) => {
                trace.turns.push(record);
                return Err(err);
            }
        };
        let satisfied = probability >= params.p_nli_min;
        record.sufficiency = Some(SufficiencyCheck {
            premise,
            probability,
            satisfied,
        });
        trace.turns.push(record);
        if satisfied {
            return Ok(true);
        }
    }
    Ok(false)
}
