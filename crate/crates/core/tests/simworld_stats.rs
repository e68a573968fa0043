//! Monte-Carlo checks of the simulator against its closed forms.

use std::sync::Arc;

use proptest::prelude::*;
use recoverr_core::confidence::{calibration_report, self_prompt_confidence};
use recoverr_core::math::derive_seed;
use recoverr_core::simworld::{
    closed_form_vanilla_risk, demo_schema, exact_nli, gen_dataset, FactDensity, SimDataset, SimDatasetSpec, SimVlm,
    SimVlmProfile,
};

fn dataset(n: usize, seed: u64) -> Arc<SimDataset> {
    Arc::new(gen_dataset(&SimDatasetSpec::small(n, 0), seed).unwrap())
}

/// (reported confidence, correct) for every calibration instance.
fn draws(vlm: &SimVlm, data: &SimDataset) -> Vec<(f64, bool)> {
    data.calibration
        .iter()
        .map(|i| {
            let s = vlm.simulate(&i.image_ref, &i.question);
            (self_prompt_confidence(&s.logits).unwrap().value(), s.correct)
        })
        .collect()
}

#[test]
fn calibrated_deciles_match_accuracy() {
    let data = dataset(100_000, 21);
    let vlm = SimVlm::new(data.clone(), SimVlmProfile::uniform(77)).unwrap();
    let d = draws(&vlm, &data);
    let mut sums = [(0.0f64, 0.0f64, 0usize); 10];
    for (c, ok) in &d {
        let b = ((c * 10.0) as usize).min(9);
        sums[b].0 += c;
        sums[b].1 += f64::from(u8::from(*ok));
        sums[b].2 += 1;
    }
    for (b, (conf, acc, n)) in sums.iter().enumerate() {
        assert!(*n > 5000, "decile {b} has {n} draws");
        let gap = (conf / *n as f64 - acc / *n as f64).abs();
        assert!(gap <= 0.02, "decile {b}: gap {gap}");
    }
}

#[test]
fn calibrated_ece_is_small_at_fifty_thousand() {
    let data = dataset(50_000, 5);
    let mut p = SimVlmProfile::uniform(8);
    p.derived = FactDensity::new(0.7, 6.0);
    let vlm = SimVlm::new(data.clone(), p).unwrap();
    let d = draws(&vlm, &data);
    let samples: Vec<_> = d.iter().map(|(c, ok)| (recoverr_core::Confidence::new(*c).unwrap(), *ok)).collect();
    let report = calibration_report(&samples, 10).unwrap();
    assert!(report.ece < 0.01, "ece {}", report.ece);
}

#[test]
fn monte_carlo_risk_matches_closed_form() {
    let data = dataset(50_000, 9);
    for (profile, gamma) in [
        (SimVlmProfile::uniform(3), 0.8),
        (
            SimVlmProfile {
                derived: FactDensity::new(0.6, 10.0),
                ..SimVlmProfile::uniform(4)
            },
            0.7,
        ),
    ] {
        let vlm = SimVlm::new(data.clone(), profile).unwrap();
        let answered: Vec<bool> = draws(&vlm, &data).into_iter().filter(|(c, _)| *c >= gamma).map(|(_, ok)| ok).collect();
        let n = answered.len() as f64;
        let mc = answered.iter().filter(|ok| !**ok).count() as f64 / n;
        let exact = closed_form_vanilla_risk(&profile, gamma).unwrap();
        let se = (exact * (1.0 - exact) / n).sqrt();
        assert!((mc - exact).abs() <= 3.0 * se, "mc {mc} vs {exact} (se {se})");
    }
}

#[test]
fn distinct_seeds_give_independent_streams() {
    assert_ne!(derive_seed(1, &["a", "b"]), derive_seed(1, &["ab"]));
    assert_ne!(derive_seed(1, &["a"]), derive_seed(2, &["a"]));
}

const FLOOR: [&str; 5] = ["{red}", "{white}", "{red, white}", "{black, white}", "{red, white, black}"];
const BUS: [&str; 4] = ["{red, white, blue}", "{yellow, blue}", "{red}", "{white, blue}"];

fn statement() -> impl Strategy<Value = String> {
    prop_oneof![
        (0..5usize, any::<bool>()).prop_map(|(i, eq)| format!("floor_tile_colors {} {}.", if eq { "=" } else { "\u{2260}" }, FLOOR[i])),
        (0..4usize, any::<bool>()).prop_map(|(i, eq)| format!("bus_colors {} {}.", if eq { "=" } else { "\u{2260}" }, BUS[i])),
        (0..3usize).prop_map(|i| format!("sky = {}.", ["clear", "cloudy", "rainy"][i])),
    ]
}

proptest! {
    /// Adding a statement never flips a decided verdict while the premise
    /// stays consistent.
    #[test]
    fn exact_nli_is_monotone(
        first in prop::collection::vec(statement(), 0..4),
        extra in statement(),
        h in prop_oneof![
            (1..4usize).prop_map(|c| format!("count = {c}.")),
            any::<bool>().prop_map(|y| format!("matches_uk_flag = {}.", if y { "yes" } else { "no" })),
        ],
    ) {
        let schema = demo_schema();
        let base = first.join(" ");
        let more = format!("{base} {extra}");
        let before = exact_nli(&schema, &base, &h);
        let after = exact_nli(&schema, &more, &h);
        // an inconsistent extension is reported as neutral rather than decided
        let consistent = exact_nli(&schema, &more, "sky \u{2260} nowhere.") == 1.0;
        if consistent && before != 0.5 {
            prop_assert_eq!(before, after);
        }
    }
}
