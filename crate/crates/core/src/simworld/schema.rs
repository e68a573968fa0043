use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    /// Directly observable and feeds at least one derivation rule.
    Base,
    /// Directly observable but feeds no rule.
    Distractor,
    /// Computed from base attributes by a rule.
    Derived,
}

impl AttributeKind {
    pub fn is_observable(self) -> bool {
        !matches!(self, AttributeKind::Derived)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub kind: AttributeKind,
    pub domain: Vec<String>,
}

/// Lookup table from source values to a derived value.
///
/// `table` is indexed in mixed radix over the source domains, first source
/// most significant, and holds indices into the target's domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub target: String,
    pub sources: Vec<String>,
    pub table: Vec<usize>,
}

/// Attribute names, value domains and derivation rules shared by every world
/// of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSchema {
    pub attributes: Vec<Attribute>,
    pub rules: Vec<Rule>,
}

/// Values compare after trimming, lowercasing and collapsing whitespace.
pub fn normalize_value(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for word in value.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

impl WorldSchema {
    pub fn new(attributes: Vec<Attribute>, rules: Vec<Rule>) -> Result<Self> {
        let schema = Self { attributes, rules };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.attributes.iter().enumerate() {
            if a.name.is_empty() || a.name.contains(['.', '=', '\u{2260}', '?']) || a.name.contains(char::is_whitespace) {
                return Err(Error::invalid(format!("bad attribute name {:?}", a.name)));
            }
            if self.attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::invalid(format!("duplicate attribute {}", a.name)));
            }
            if a.domain.is_empty() {
                return Err(Error::invalid(format!("attribute {} has an empty domain", a.name)));
            }
            for (j, v) in a.domain.iter().enumerate() {
                if v.contains('.') || normalize_value(v).is_empty() {
                    return Err(Error::invalid(format!("bad value {v:?} for {}", a.name)));
                }
                if a.domain[..j].iter().any(|w| normalize_value(w) == normalize_value(v)) {
                    return Err(Error::invalid(format!("duplicate value {v:?} for {}", a.name)));
                }
            }
        }
        for rule in &self.rules {
            let (_, target) = self
                .attribute(&rule.target)
                .ok_or_else(|| Error::invalid(format!("rule for unknown attribute {}", rule.target)))?;
            if target.kind != AttributeKind::Derived {
                return Err(Error::invalid(format!("rule target {} is not derived", rule.target)));
            }
            if rule.sources.is_empty() {
                return Err(Error::invalid(format!("rule for {} has no sources", rule.target)));
            }
            let mut size = 1usize;
            for s in &rule.sources {
                let (_, source) = self
                    .attribute(s)
                    .ok_or_else(|| Error::invalid(format!("rule for {} reads unknown attribute {s}", rule.target)))?;
                if source.kind != AttributeKind::Base {
                    return Err(Error::invalid(format!("rule for {} reads non-base attribute {s}", rule.target)));
                }
                size *= source.domain.len();
            }
            if rule.table.len() != size || rule.table.iter().any(|&v| v >= target.domain.len()) {
                return Err(Error::invalid(format!("malformed table for {}", rule.target)));
            }
        }
        for a in &self.attributes {
            let n_rules = self.rules.iter().filter(|r| r.target == a.name).count();
            let feeds = self.rules.iter().any(|r| r.sources.contains(&a.name));
            let ok = match a.kind {
                AttributeKind::Derived => n_rules == 1,
                AttributeKind::Base => feeds,
                AttributeKind::Distractor => !feeds,
            };
            if !ok {
                return Err(Error::invalid(format!("attribute {} does not match its kind", a.name)));
            }
        }
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Option<(usize, &Attribute)> {
        self.attributes.iter().enumerate().find(|(_, a)| a.name == name)
    }

    pub fn rule_for(&self, name: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.target == name)
    }

    /// Indices of the observable attributes an attribute depends on.
    pub fn observable_sources(&self, name: &str) -> Vec<usize> {
        match self.attribute(name) {
            Some((i, a)) if a.kind.is_observable() => vec![i],
            Some(_) => self
                .rule_for(name)
                .map(|r| r.sources.iter().filter_map(|s| self.attribute(s).map(|(i, _)| i)).collect())
                .unwrap_or_default(),
            None => Vec::new(),
        }
    }

    pub fn value_index(&self, attr: usize, value: &str) -> Option<usize> {
        let domain = &self.attributes[attr].domain;
        if let Some(i) = domain.iter().position(|d| d == value) {
            return Some(i);
        }
        let v = normalize_value(value);
        self.attributes[attr].domain.iter().position(|d| normalize_value(d) == v)
    }

    /// Value index of `attr` given value indices of every observable attribute.
    pub fn evaluate(&self, attr: usize, assignment: &[usize]) -> usize {
        let a = &self.attributes[attr];
        if a.kind.is_observable() {
            return assignment[attr];
        }
        let rule = self.rule_for(&a.name).expect("derived attributes have rules");
        let mut index = 0usize;
        for s in &rule.sources {
            let (si, source) = self.attribute(s).expect("validated");
            index = index * source.domain.len() + assignment[si];
        }
        rule.table[index]
    }

    pub fn derived(&self) -> impl Iterator<Item = &Attribute> {
        self.attributes.iter().filter(|a| a.kind == AttributeKind::Derived)
    }
}

/// Builds a rule table from a function of source values.
pub fn tabulate(schema_attrs: &[Attribute], target: &str, sources: &[&str], f: impl Fn(&[&str]) -> String) -> Result<Rule> {
    let find = |n: &str| {
        schema_attrs
            .iter()
            .find(|a| a.name == n)
            .ok_or_else(|| Error::invalid(format!("unknown attribute {n}")))
    };
    let target_attr = find(target)?;
    let domains: Vec<&Vec<String>> = sources.iter().map(|s| find(s).map(|a| &a.domain)).collect::<Result<_>>()?;
    let size: usize = domains.iter().map(|d| d.len()).product();
    let mut table = Vec::with_capacity(size);
    let mut digits = vec![0usize; domains.len()];
    for _ in 0..size {
        let values: Vec<&str> = digits.iter().zip(&domains).map(|(&d, dom)| dom[d].as_str()).collect();
        let out = f(&values);
        let idx = target_attr
            .domain
            .iter()
            .position(|v| normalize_value(v) == normalize_value(&out))
            .ok_or_else(|| Error::invalid(format!("{out:?} is not a value of {target}")))?;
        table.push(idx);
        for k in (0..digits.len()).rev() {
            digits[k] += 1;
            if digits[k] < domains[k].len() {
                break;
            }
            digits[k] = 0;
        }
    }
    Ok(Rule {
        target: target.to_string(),
        sources: sources.iter().map(|s| s.to_string()).collect(),
        table,
    })
}

/// One synthetic scene: a value for every observable attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub id: String,
    pub facts: BTreeMap<String, String>,
}

impl SynthWorld {
    /// Value indices of every observable attribute, 0 for derived slots.
    pub fn assignment(&self, schema: &WorldSchema) -> Result<Vec<usize>> {
        schema
            .attributes
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if !a.kind.is_observable() {
                    return Ok(0);
                }
                let v = self
                    .facts
                    .get(&a.name)
                    .ok_or_else(|| Error::invalid(format!("world {} lacks {}", self.id, a.name)))?;
                schema
                    .value_index(i, v)
                    .ok_or_else(|| Error::invalid(format!("world {}: {v:?} is not a value of {}", self.id, a.name)))
            })
            .collect()
    }

    /// Value index of one attribute, derived ones computed through their rule.
    pub fn index_of(&self, schema: &WorldSchema, attr: usize) -> Option<usize> {
        let a = &schema.attributes[attr];
        if a.kind.is_observable() {
            return schema.value_index(attr, self.facts.get(&a.name)?);
        }
        let rule = schema.rule_for(&a.name)?;
        let mut index = 0usize;
        for s in &rule.sources {
            let (si, source) = schema.attribute(s)?;
            index = index * source.domain.len() + self.index_of(schema, si)?;
        }
        rule.table.get(index).copied()
    }

    /// Value of any attribute, derived ones computed through their rule.
    pub fn value<'s>(&self, schema: &'s WorldSchema, name: &str) -> Option<&'s str> {
        let (i, a) = schema.attribute(name)?;
        Some(a.domain[self.index_of(schema, i)?].as_str())
    }
}

pub const WORLD_PREFIX: &str = "sim:world-";

pub fn world_ref(index: usize) -> String {
    format!("{WORLD_PREFIX}{index:06}")
}

pub fn parse_world_ref(image: &str) -> Option<usize> {
    image.strip_prefix(WORLD_PREFIX)?.parse().ok()
}

const QUESTION_PREFIX: &str = "What is the value of ";

pub fn question_for(attr: &str) -> String {
    format!("{QUESTION_PREFIX}{attr}?")
}

pub fn parse_question(question: &str) -> Option<&str> {
    let attr = question.trim().strip_prefix(QUESTION_PREFIX)?.strip_suffix('?')?.trim();
    (!attr.is_empty()).then_some(attr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Eq,
    Ne,
}

/// `attr = value.` or `attr ≠ value.`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub attribute: String,
    pub relation: Relation,
    pub value: String,
}

impl Assertion {
    pub fn eq(attribute: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            attribute: attribute.into(),
            relation: Relation::Eq,
            value: value.into(),
        }
    }

    pub fn negated(&self) -> Self {
        Self {
            relation: match self.relation {
                Relation::Eq => Relation::Ne,
                Relation::Ne => Relation::Eq,
            },
            ..self.clone()
        }
    }
}

impl fmt::Display for Assertion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.relation {
            Relation::Eq => "=",
            Relation::Ne => "\u{2260}",
        };
        write!(f, "{} {op} {}.", self.attribute, self.value)
    }
}

/// Parses one statement; accepts `≠` and `!=` for inequality.
pub fn parse_statement(statement: &str) -> Option<Assertion> {
    let s = statement.trim();
    let s = s.strip_suffix('.').unwrap_or(s);
    let (attr, relation, value) = if let Some((a, v)) = s.split_once('\u{2260}') {
        (a, Relation::Ne, v)
    } else if let Some((a, v)) = s.split_once("!=") {
        (a, Relation::Ne, v)
    } else {
        let (a, v) = s.split_once('=')?;
        (a, Relation::Eq, v)
    };
    let attr = attr.trim();
    let value = value.trim();
    if attr.is_empty() || value.is_empty() || attr.contains(char::is_whitespace) || value.contains(['=', '\u{2260}']) {
        return None;
    }
    Some(Assertion {
        attribute: attr.to_string(),
        relation,
        value: value.to_string(),
    })
}

fn set_value(items: &[&str]) -> String {
    format!("{{{}}}", items.join(", "))
}

fn set_items(value: &str) -> Vec<String> {
    value
        .trim()
        .trim_start_matches('{')
        .trim_end_matches('}')
        .split(',')
        .map(normalize_value)
        .filter(|s| !s.is_empty())
        .collect()
}

/// A small hand-built schema with set-valued colour attributes: a colour
/// count and a flag-colour match rule.
pub fn demo_schema() -> WorldSchema {
    let floor_domain = [
        set_value(&["red"]),
        set_value(&["white"]),
        set_value(&["red", "white"]),
        set_value(&["black", "white"]),
        set_value(&["red", "white", "black"]),
    ];
    let bus_domain = [
        set_value(&["red", "white", "blue"]),
        set_value(&["yellow", "blue"]),
        set_value(&["red"]),
        set_value(&["white", "blue"]),
    ];
    let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let attributes = vec![
        Attribute {
            name: "floor_tile_colors".into(),
            kind: AttributeKind::Base,
            domain: floor_domain.to_vec(),
        },
        Attribute {
            name: "bus_colors".into(),
            kind: AttributeKind::Base,
            domain: bus_domain.to_vec(),
        },
        Attribute {
            name: "count".into(),
            kind: AttributeKind::Derived,
            domain: strings(&["1", "2", "3"]),
        },
        Attribute {
            name: "matches_uk_flag".into(),
            kind: AttributeKind::Derived,
            domain: strings(&["yes", "no"]),
        },
        Attribute {
            name: "sky".into(),
            kind: AttributeKind::Distractor,
            domain: strings(&["clear", "cloudy", "rainy"]),
        },
    ];
    let count = tabulate(&attributes, "count", &["floor_tile_colors"], |v| set_items(v[0]).len().to_string())
        .expect("demo count rule");
    let uk = {
        let mut flag = set_items("{red, white, blue}");
        flag.sort();
        tabulate(&attributes, "matches_uk_flag", &["bus_colors"], move |v| {
            let mut colors = set_items(v[0]);
            colors.sort();
            if colors == flag { "yes" } else { "no" }.to_string()
        })
        .expect("demo flag rule")
    };
    WorldSchema::new(attributes, vec![count, uk]).expect("demo schema is valid")
}
