use std::fs;
use std::path::PathBuf;

use recoverr_core::modelio::{parse_subquestions, render_prompt, render_qgen, PromptSlots, Role};

fn fixture(path: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(path);
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn slots(pairs: &[(&str, &str)]) -> PromptSlots {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn verify_prompt_matches_golden() {
    let p = render_prompt(
        Role::VlmVerify,
        &slots(&[("question", "What kind of diet does this dish suit?"), ("answer", "vegetarian")]),
    )
    .unwrap();
    assert_eq!(p, fixture("prompts/verify.txt"));
}

#[test]
fn nli_prompt_matches_golden() {
    let p = render_prompt(
        Role::Nli,
        &slots(&[
            ("premise", "The floor tiles are red. The floor tiles are white."),
            ("hypothesis", "The floor has two colors."),
        ]),
    )
    .unwrap();
    assert_eq!(p, fixture("prompts/nli.txt"));
}

#[test]
fn paraphrase_prompt_matches_golden() {
    let p = render_prompt(
        Role::Paraphrase,
        &slots(&[("question", "How many colors are the floor tiles?"), ("answer", "two")]),
    )
    .unwrap();
    assert_eq!(p, fixture("prompts/paraphrase.txt"));
}

#[test]
fn qgen_prompt_matches_golden() {
    let evidences = vec!["A kitchen with a tiled floor.".to_string(), "The floor tiles are red.".to_string()];
    let p = render_qgen("How many colors are the floor tiles?", "two", &evidences, 10);
    assert_eq!(p, fixture("prompts/qgen.txt"));
}

#[test]
fn subquestion_fixtures_parse_to_the_same_questions() {
    let expected = [
        "What color are the floor tiles?",
        "Is there a pattern on the floor?",
        "What is the floor made of?",
    ];
    for name in ["numbered", "bulleted", "blank_lines", "mixed", "crlf"] {
        let raw = fixture(&format!("qgen/{name}.txt"));
        assert_eq!(parse_subquestions(&raw, 10), expected, "{name}");
        assert_eq!(parse_subquestions(&raw, 2), expected[..2], "{name} truncated");
    }
}
