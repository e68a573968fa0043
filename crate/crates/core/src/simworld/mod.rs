//! A fully observable synthetic stand-in for images and models.
//!
//! Every world of a dataset shares one [`WorldSchema`]: observable base
//! attributes, distractor attributes that feed no rule, and derived
//! attributes computed from base attributes by lookup tables. Target
//! questions ask about derived attributes; sub-questions ask about
//! observable ones. Statements use the rigid grammar `attr = value.` so that
//! entailment and negation can be computed exactly.

mod clients;
mod nli;
mod schema;
mod vlm;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use clients::{is_distractor_slot, SimCaptionTool, SimNegator, SimNli, SimParaphraser, SimQgen};
pub use nli::{exact_negate, exact_nli, split_statements, NEUTRAL};
pub use schema::{
    demo_schema, normalize_value, parse_question, parse_statement, parse_world_ref, question_for, tabulate,
    world_ref, Assertion, Attribute, AttributeKind, Relation, Rule, SynthWorld, WorldSchema, WORLD_PREFIX,
};
pub use vlm::{closed_form_vanilla_risk, ConfidenceMode, FactDensity, SimAnswer, SimVlm, SimVlmProfile, REFUSAL};

use crate::error::{Error, Result};
use crate::math::derive_seed;
use crate::selective::Instance;

/// Shape of a randomly generated schema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub n_derived: usize,
    /// Fraction of derived attributes computed from two sources instead of one.
    pub two_source_fraction: f64,
    pub n_distractors: usize,
    pub base_domain_min: usize,
    pub base_domain_max: usize,
    pub derived_domain_min: usize,
    pub derived_domain_max: usize,
}

impl Default for SchemaSpec {
    fn default() -> Self {
        Self {
            n_derived: 8,
            two_source_fraction: 0.25,
            n_distractors: 6,
            base_domain_min: 3,
            base_domain_max: 5,
            derived_domain_min: 2,
            derived_domain_max: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemaSource {
    Demo,
    Random(SchemaSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimDatasetSpec {
    pub n_calibration: usize,
    pub n_test: usize,
    /// Fraction of generated sub-questions that are distractors, in [0, 1).
    pub distractor_ratio: f64,
    pub schema: SchemaSource,
}

impl SimDatasetSpec {
    /// Random default schema, no distractor questions.
    pub fn small(n_calibration: usize, n_test: usize) -> Self {
        Self {
            n_calibration,
            n_test,
            distractor_ratio: 0.0,
            schema: SchemaSource::Random(SchemaSpec::default()),
        }
    }

    pub fn n_instances(&self) -> usize {
        self.n_calibration + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_instances() == 0 {
            return Err(Error::invalid("dataset needs at least one instance"));
        }
        if !(0.0..1.0).contains(&self.distractor_ratio) {
            return Err(Error::invalid(format!(
                "distractor ratio {} outside [0, 1)",
                self.distractor_ratio
            )));
        }
        if let SchemaSource::Random(s) = self.schema {
            if s.n_derived == 0
                || s.base_domain_min < 2
                || s.base_domain_min > s.base_domain_max
                || s.derived_domain_min < 2
                || s.derived_domain_min > s.derived_domain_max
                || !(0.0..=1.0).contains(&s.two_source_fraction)
            {
                return Err(Error::invalid(format!("bad schema spec {s:?}")));
            }
        }
        Ok(())
    }
}

/// Schema, worlds and the two instance splits; world `i` is referenced by
/// the image id `sim:world-{i:06}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDataset {
    pub schema: WorldSchema,
    pub worlds: Vec<SynthWorld>,
    pub calibration: Vec<Instance>,
    pub test: Vec<Instance>,
    pub distractor_ratio: f64,
}

impl SimDataset {
    pub fn world(&self, image: &str) -> Option<&SynthWorld> {
        parse_world_ref(image).and_then(|i| self.worlds.get(i))
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        for (i, w) in self.worlds.iter().enumerate() {
            if w.id != world_ref(i) {
                return Err(Error::invalid(format!("world {i} has id {}", w.id)));
            }
            w.assignment(&self.schema)?;
        }
        Ok(())
    }
}

const BASE_VALUES: [&str; 10] = [
    "red", "white", "blue", "green", "yellow", "black", "gray", "brown", "orange", "purple",
];
const DERIVED_VALUES: [&str; 6] = ["none", "low", "medium", "high", "mixed", "unknown_kind"];

fn pick_domain(rng: &mut ChaCha8Rng, vocabulary: &[&str], min: usize, max: usize) -> Vec<String> {
    let n = rng.random_range(min..=max).min(vocabulary.len());
    let mut values: Vec<&str> = vocabulary.to_vec();
    values.shuffle(rng);
    values.truncate(n);
    values.into_iter().map(String::from).collect()
}

/// Random schema in which every derived value is reachable.
pub fn random_schema(spec: &SchemaSpec, seed: u64) -> Result<WorldSchema> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["schema"]));
    let mut attributes = Vec::new();
    let mut rules = Vec::new();
    let mut n_base = 0usize;
    let mut plans = Vec::new();
    for d in 0..spec.n_derived {
        let n_sources = if rng.random::<f64>() < spec.two_source_fraction { 2 } else { 1 };
        let sources: Vec<String> = (0..n_sources)
            .map(|_| {
                let name = format!("base_{n_base:02}");
                n_base += 1;
                name
            })
            .collect();
        plans.push((format!("derived_{d:02}"), sources));
    }
    for i in 0..n_base {
        attributes.push(Attribute {
            name: format!("base_{i:02}"),
            kind: AttributeKind::Base,
            domain: pick_domain(&mut rng, &BASE_VALUES, spec.base_domain_min, spec.base_domain_max),
        });
    }
    for (name, _) in &plans {
        attributes.push(Attribute {
            name: name.clone(),
            kind: AttributeKind::Derived,
            domain: pick_domain(&mut rng, &DERIVED_VALUES, spec.derived_domain_min, spec.derived_domain_max),
        });
    }
    for i in 0..spec.n_distractors {
        attributes.push(Attribute {
            name: format!("distractor_{i:02}"),
            kind: AttributeKind::Distractor,
            domain: pick_domain(&mut rng, &BASE_VALUES, spec.base_domain_min, spec.base_domain_max),
        });
    }
    for (name, sources) in plans {
        let size: usize = sources
            .iter()
            .map(|s| attributes.iter().find(|a| &a.name == s).expect("just added").domain.len())
            .product();
        let target_size = attributes.iter().find(|a| a.name == name).expect("just added").domain.len();
        // every derived value appears at least once, the rest at random
        let mut table: Vec<usize> = (0..size).map(|i| if i < target_size { i } else { rng.random_range(0..target_size) }).collect();
        table.shuffle(&mut rng);
        rules.push(Rule {
            target: name,
            sources,
            table,
        });
    }
    WorldSchema::new(attributes, rules)
}

fn random_world(schema: &WorldSchema, index: usize, seed: u64) -> SynthWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["world", &index.to_string()]));
    let facts = schema
        .attributes
        .iter()
        .filter(|a| a.kind.is_observable())
        .map(|a| (a.name.clone(), a.domain[rng.random_range(0..a.domain.len())].clone()))
        .collect();
    SynthWorld {
        id: world_ref(index),
        facts,
    }
}

/// Generates one world per instance with a derived-attribute target
/// question. The first `n_calibration` instances form the calibration split.
pub fn gen_dataset(spec: &SimDatasetSpec, seed: u64) -> Result<SimDataset> {
    spec.validate()?;
    let schema = match &spec.schema {
        SchemaSource::Demo => demo_schema(),
        SchemaSource::Random(s) => random_schema(s, seed)?,
    };
    let derived: Vec<String> = schema.derived().map(|a| a.name.clone()).collect();
    if derived.is_empty() {
        return Err(Error::invalid("schema has no derived attributes"));
    }
    let mut worlds = Vec::with_capacity(spec.n_instances());
    let mut calibration = Vec::with_capacity(spec.n_calibration);
    let mut test = Vec::with_capacity(spec.n_test);
    for i in 0..spec.n_instances() {
        let world = random_world(&schema, i, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["target", &i.to_string()]));
        let target = &derived[rng.random_range(0..derived.len())];
        let gold = world.value(&schema, target).expect("derived attributes evaluate").to_string();
        let (split, id) = if i < spec.n_calibration {
            ("calibration", format!("cal-{i:06}"))
        } else {
            ("test", format!("test-{:06}", i - spec.n_calibration))
        };
        let mut metadata = BTreeMap::new();
        metadata.insert("split".to_string(), split.to_string());
        metadata.insert("target".to_string(), target.clone());
        let instance = Instance {
            id,
            image_ref: world.id.clone(),
            question: question_for(target),
            gold_answers: vec![gold],
            metadata,
        };
        if i < spec.n_calibration {
            calibration.push(instance);
        } else {
            test.push(instance);
        }
        worlds.push(world);
    }
    Ok(SimDataset {
        schema,
        worlds,
        calibration,
        test,
        distractor_ratio: spec.distractor_ratio,
    })
}
