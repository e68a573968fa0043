use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::schema::{parse_statement, Assertion, Relation, WorldSchema};
use crate::error::{Error, Result};

/// Largest number of joint assignments enumerated before giving up as neutral.
const MAX_ASSIGNMENTS: usize = 1 << 20;

pub const NEUTRAL: f64 = 0.5;

/// A parsed assertion bound to schema indices.
struct Constraint {
    attr: usize,
    relation: Relation,
    /// `None` when the value is outside the attribute's domain.
    value: Option<usize>,
    vars: Vec<usize>,
}

impl Constraint {
    fn bind(schema: &WorldSchema, a: &Assertion) -> Option<Self> {
        let (attr, _) = schema.attribute(&a.attribute)?;
        Some(Self {
            attr,
            relation: a.relation,
            value: schema.value_index(attr, &a.value),
            vars: schema.observable_sources(&a.attribute),
        })
    }

    fn holds(&self, schema: &WorldSchema, assignment: &[usize]) -> bool {
        let equal = self.value == Some(schema.evaluate(self.attr, assignment));
        match self.relation {
            Relation::Eq => equal,
            Relation::Ne => !equal,
        }
    }
}

/// Splits a premise into statements on sentence-ending dots.
pub fn split_statements(premise: &str) -> Vec<&str> {
    premise.split('.').map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Counts (consistent, consistent-and-satisfying) assignments over `vars`.
fn enumerate(
    schema: &WorldSchema,
    vars: &[usize],
    premise: &[&Constraint],
    hypothesis: Option<&Constraint>,
) -> Option<(usize, usize)> {
    let sizes: Vec<usize> = vars.iter().map(|&v| schema.attributes[v].domain.len()).collect();
    let total = sizes.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s))?;
    if total > MAX_ASSIGNMENTS {
        return None;
    }
    let mut assignment = vec![0usize; schema.attributes.len()];
    let mut digits = vec![0usize; vars.len()];
    let (mut consistent, mut satisfying) = (0usize, 0usize);
    for _ in 0..total {
        for (d, &v) in digits.iter().zip(vars) {
            assignment[v] = *d;
        }
        if premise.iter().all(|c| c.holds(schema, &assignment)) {
            consistent += 1;
            if hypothesis.is_none_or(|h| h.holds(schema, &assignment)) {
                satisfying += 1;
            }
        }
        for k in (0..digits.len()).rev() {
            digits[k] += 1;
            if digits[k] < sizes[k] {
                break;
            }
            digits[k] = 0;
        }
    }
    Some((consistent, satisfying))
}

/// Exact entailment over the schema: 1 when every assignment of the
/// observable attributes consistent with the premise satisfies the
/// hypothesis, 0 when none does, 0.5 otherwise.
///
/// Empty, inconsistent or unparseable premises are neutral.
pub fn exact_nli(schema: &WorldSchema, premise: &str, hypothesis: &str) -> f64 {
    let Some(h) = parse_statement(hypothesis).and_then(|a| Constraint::bind(schema, &a)) else {
        log::warn!("unparseable hypothesis {hypothesis:?}");
        return NEUTRAL;
    };
    let mut constraints = Vec::new();
    for s in split_statements(premise) {
        match parse_statement(s).and_then(|a| Constraint::bind(schema, &a)) {
            Some(c) => constraints.push(c),
            None => {
                log::warn!("unparseable premise statement {s:?}");
                return NEUTRAL;
            }
        }
    }
    if constraints.is_empty() {
        return NEUTRAL;
    }

    // group statements into components linked by shared variables, seeded by the hypothesis
    let mut groups: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut assigned = vec![false; constraints.len()];
    let mut seeds: Vec<Option<Vec<usize>>> = vec![Some(h.vars.clone())];
    seeds.extend((0..constraints.len()).map(|_| None));
    for (seed_index, seed) in seeds.into_iter().enumerate() {
        let mut vars = match seed {
            Some(v) => v,
            None => {
                let i = seed_index - 1;
                if assigned[i] {
                    continue;
                }
                constraints[i].vars.clone()
            }
        };
        let mut members = Vec::new();
        loop {
            let mut grew = false;
            for (i, c) in constraints.iter().enumerate() {
                if !assigned[i] && c.vars.iter().any(|v| vars.contains(v)) {
                    assigned[i] = true;
                    members.push(i);
                    for v in &c.vars {
                        if !vars.contains(v) {
                            vars.push(*v);
                        }
                    }
                    grew = true;
                }
            }
            if !grew {
                break;
            }
        }
        groups.push((vars, members));
    }

    let mut verdict = NEUTRAL;
    for (g, (vars, members)) in groups.iter().enumerate() {
        let premise: Vec<&Constraint> = members.iter().map(|&i| &constraints[i]).collect();
        let hypothesis = (g == 0).then_some(&h);
        let Some((consistent, satisfying)) = enumerate(schema, vars, &premise, hypothesis) else {
            log::warn!("premise too large to enumerate exactly");
            return NEUTRAL;
        };
        if consistent == 0 {
            return NEUTRAL;
        }
        if g == 0 {
            verdict = if satisfying == consistent {
                1.0
            } else if satisfying == 0 {
                0.0
            } else {
                NEUTRAL
            };
        }
    }
    verdict
}

/// Flips `=` and `≠`; an involution on parseable statements.
pub fn exact_negate(statement: &str) -> Result<String> {
    parse_statement(statement)
        .map(|a| a.negated().to_string())
        .ok_or_else(|| Error::Unparseable(format!("not an attribute statement: {statement:?}")))
}
