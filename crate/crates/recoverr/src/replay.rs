//! Re-checks every decision recorded in a verification trace.

use std::fmt::Write as _;

use recoverr_core::recoverr::{statement_key, EvidenceCheck, RecoverrTrace, SufficiencyCheck, TerminalKind};
use recoverr_core::simworld::{exact_negate, exact_nli, WorldSchema};

/// Findings of a trace audit.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceAudit {
    pub instance_id: String,
    pub terminal: TerminalKind,
    pub turns: usize,
    pub reliable: usize,
    pub relevant: usize,
    pub issues: Vec<String>,
    /// Human-readable replay, one step per line.
    pub narrative: String,
}

impl TraceAudit {
    pub fn is_consistent(&self) -> bool {
        self.issues.is_empty()
    }
}

const TOLERANCE: f64 = 1e-12;

struct Replayer<'a> {
    trace: &'a RecoverrTrace,
    schema: Option<&'a WorldSchema>,
    keys: Vec<String>,
    relevant: Vec<String>,
    reliable: usize,
    issues: Vec<String>,
    out: String,
}

impl Replayer<'_> {
    fn issue(&mut self, msg: String) {
        let _ = writeln!(self.out, "  !! {msg}");
        self.issues.push(msg);
    }

    /// `batch` holds keys of the other non-duplicate statements of the same
    /// generation step; duplicates may refer to them.
    fn check_evidence(&mut self, where_: &str, c: &EvidenceCheck, batch: &[String]) {
        let p = &self.trace.params;
        let e = &c.evidence;
        let key = statement_key(&e.statement);
        let _ = writeln!(
            self.out,
            "  {where_}: {:?} conf {:.4}{}{}{}",
            e.statement,
            e.confidence.value(),
            if c.duplicate { " duplicate" } else { "" },
            if c.reliable { " reliable" } else { "" },
            if c.relevant { " relevant" } else { "" },
        );
        if c.duplicate {
            if !self.keys.contains(&key) && !batch.contains(&key) {
                self.issue(format!("{where_}: {:?} marked duplicate but not seen before", e.statement));
            }
            return;
        }
        if self.keys.contains(&key) {
            self.issue(format!("{where_}: {:?} repeats a known statement", e.statement));
        }
        let reliable = e.confidence.value() >= p.evidence_conf_bound;
        if c.reliable != reliable {
            self.issue(format!(
                "{where_}: reliability {} but confidence {} against bound {}",
                c.reliable,
                e.confidence.value(),
                p.evidence_conf_bound
            ));
        }
        if !c.reliable {
            if c.relevant {
                self.issue(format!("{where_}: unreliable evidence marked relevant"));
            }
            return;
        }
        self.keys.push(key);
        self.reliable += 1;
        match &c.relevance {
            Some(rel) => {
                let delta = (rel.p_given_statement - rel.p_given_negation).abs();
                if (delta - rel.relevance).abs() > TOLERANCE {
                    self.issue(format!("{where_}: relevance {} is not |{} - {}|", rel.relevance, rel.p_given_statement, rel.p_given_negation));
                }
                if c.relevant != (rel.relevance >= p.delta_min) {
                    self.issue(format!("{where_}: relevant = {} with relevance {} and delta_min {}", c.relevant, rel.relevance, p.delta_min));
                }
                if let (Some(schema), Some(h)) = (self.schema, &self.trace.hypothesis) {
                    match exact_negate(&e.statement) {
                        Ok(neg) if neg == rel.negated => {}
                        Ok(neg) => self.issue(format!("{where_}: negation {:?}, expected {neg:?}", rel.negated)),
                        Err(_) => {}
                    }
                    let ps = exact_nli(schema, &e.statement, &h.statement);
                    let pn = exact_nli(schema, &rel.negated, &h.statement);
                    if (ps - rel.p_given_statement).abs() > TOLERANCE || (pn - rel.p_given_negation).abs() > TOLERANCE {
                        self.issue(format!(
                            "{where_}: recorded entailment ({}, {}) but the world gives ({ps}, {pn})",
                            rel.p_given_statement, rel.p_given_negation
                        ));
                    }
                }
            }
            None => {
                let tool_unfiltered = matches!(e.source, recoverr_core::recoverr::EvidenceSource::VisionTool { .. })
                    && !p.filter_tool_relevance;
                if !tool_unfiltered {
                    self.issue(format!("{where_}: reliable evidence without a relevance check"));
                } else if !c.relevant {
                    self.issue(format!("{where_}: unfiltered tool evidence not admitted as relevant"));
                }
            }
        }
        if c.relevant {
            self.relevant.push(e.statement.clone());
        }
    }

    fn check_sufficiency(&mut self, where_: &str, s: &SufficiencyCheck) {
        let p = &self.trace.params;
        let _ = writeln!(
            self.out,
            "  {where_}: P(H | premise) = {:.4}{}",
            s.probability,
            if s.satisfied { " sufficient" } else { "" }
        );
        let premise = self.relevant.join(" ");
        if s.premise != premise {
            self.issue(format!("{where_}: premise {:?} differs from the relevant pool {premise:?}", s.premise));
        }
        if premise.is_empty() && s.probability != 0.0 {
            self.issue(format!("{where_}: empty premise with probability {}", s.probability));
        }
        if s.satisfied != (s.probability >= p.p_nli_min) {
            self.issue(format!("{where_}: satisfied = {} with probability {} and threshold {}", s.satisfied, s.probability, p.p_nli_min));
        }
        if let (Some(schema), Some(h), false) = (self.schema, &self.trace.hypothesis, premise.is_empty()) {
            let expected = exact_nli(schema, &s.premise, &h.statement);
            if (expected - s.probability).abs() > TOLERANCE {
                self.issue(format!("{where_}: recorded {} but the world gives {expected}", s.probability));
            }
        }
    }
}

/// Replays `trace`; with a world schema every entailment is recomputed too.
pub fn replay_trace(trace: &RecoverrTrace, schema: Option<&WorldSchema>) -> TraceAudit {
    let p = &trace.params;
    let mut r = Replayer {
        trace,
        schema,
        keys: Vec::new(),
        relevant: Vec::new(),
        reliable: 0,
        issues: Vec::new(),
        out: String::new(),
    };
    let _ = writeln!(
        r.out,
        "{}: {:?} about {} answered {:?} with confidence {:.4} (gamma {:.4})",
        trace.instance_id, trace.question, trace.image, trace.initial_answer, trace.initial_confidence, p.gamma
    );
    let above = trace.initial_confidence >= p.gamma;
    if above != (trace.terminal.kind == TerminalKind::AnsweredThreshold) {
        r.issue(format!(
            "confidence {} against gamma {} but terminal {:?}",
            trace.initial_confidence, p.gamma, trace.terminal.kind
        ));
    }
    if let Some(h) = &trace.hypothesis {
        let _ = writeln!(r.out, "  hypothesis: {:?}", h.statement);
    }

    for (i, c) in trace.tool_evidence.iter().enumerate() {
        r.check_evidence(&format!("tool evidence {}", i + 1), c, &[]);
    }
    for f in &trace.tool_failures {
        let _ = writeln!(r.out, "  tool {} failed: {}", f.tool, f.error);
    }
    if let Some(s) = &trace.tool_sufficiency {
        if p.n_turns != 0 {
            r.issue("tool-only sufficiency check with evidence turns enabled".to_string());
        }
        r.check_sufficiency("tools", s);
    }

    let mut last_satisfied = trace.tool_sufficiency.as_ref().map(|s| s.satisfied);
    for (i, t) in trace.turns.iter().enumerate() {
        let _ = writeln!(r.out, " turn {}: {} sub-questions", t.turn, t.questions.len());
        if t.turn != i + 1 {
            r.issue(format!("turn {} recorded at position {}", t.turn, i + 1));
        }
        if t.questions.len() > p.k_per_turn {
            r.issue(format!("turn {} asked {} > k = {}", t.turn, t.questions.len(), p.k_per_turn));
        }
        let batch: Vec<String> = t
            .evidence
            .iter()
            .filter(|c| !c.duplicate)
            .map(|c| statement_key(&c.evidence.statement))
            .collect();
        for (k, key) in batch.iter().enumerate() {
            if batch[..k].contains(key) {
                r.issue(format!("turn {}: statement repeated within the batch", t.turn));
            }
        }
        for (j, c) in t.evidence.iter().enumerate() {
            r.check_evidence(&format!("turn {} evidence {}", t.turn, j + 1), c, &batch);
        }
        match &t.sufficiency {
            Some(s) => {
                r.check_sufficiency(&format!("turn {}", t.turn), s);
                if last_satisfied == Some(true) {
                    r.issue(format!("turn {} ran after a sufficient premise", t.turn));
                }
                last_satisfied = Some(s.satisfied);
            }
            None if trace.terminal.kind != TerminalKind::FailedClosed || i + 1 != trace.turns.len() => {
                r.issue(format!("turn {} has no sufficiency check", t.turn));
            }
            None => {}
        }
    }
    if trace.turns.len() > p.n_turns {
        r.issue(format!("{} turns with n_turns = {}", trace.turns.len(), p.n_turns));
    }
    match trace.terminal.kind {
        TerminalKind::AnsweredRecovered if last_satisfied != Some(true) => {
            r.issue("recovered without a sufficient premise".to_string())
        }
        TerminalKind::Abstained if last_satisfied == Some(true) => {
            r.issue("abstained after a sufficient premise".to_string())
        }
        TerminalKind::Abstained if p.n_turns > 0 && trace.turns.len() != p.n_turns => r.issue(format!(
            "abstained after {} of {} turns",
            trace.turns.len(),
            p.n_turns
        )),
        TerminalKind::FailedClosed if trace.terminal.error.is_none() => {
            r.issue("failed closed without an error".to_string())
        }
        _ => {}
    }
    if trace.terminal.kind != TerminalKind::FailedClosed && trace.calls.qgen != trace.turns.len() {
        r.issue(format!("{} generator calls for {} turns", trace.calls.qgen, trace.turns.len()));
    }
    let _ = writeln!(r.out, " terminal: {:?} at turn {}", trace.terminal.kind, trace.terminal.turn);
    if let Some(e) = &trace.terminal.error {
        let _ = writeln!(r.out, "  error: {e}");
    }
    TraceAudit {
        instance_id: trace.instance_id.clone(),
        terminal: trace.terminal.kind,
        turns: trace.turns.len(),
        reliable: r.reliable,
        relevant: r.relevant.len(),
        issues: r.issues,
        narrative: r.out,
    }
}
