use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    VlmAnswer,
    VlmVerify,
    Qgen,
    Paraphrase,
    Nli,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::VlmAnswer => "vlm_answer",
            Role::VlmVerify => "vlm_verify",
            Role::Qgen => "qgen",
            Role::Paraphrase => "paraphrase",
            Role::Nli => "nli",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            Role::VlmAnswer => VLM_ANSWER_TEMPLATE,
            Role::VlmVerify => VERIFY_TEMPLATE,
            Role::Qgen => QGEN_TEMPLATE,
            Role::Paraphrase => PARAPHRASE_TEMPLATE,
            Role::Nli => NLI_TEMPLATE,
        }
    }
}

pub type PromptSlots = BTreeMap<String, String>;

pub const VLM_ANSWER_TEMPLATE: &str = "Question: {question} Short answer:";

pub const VERIFY_TEMPLATE: &str = "Question: {question}\n\
Answer: {answer}\n\
Is the given answer correct for the question? Answer yes or no:";

pub const QGEN_TEMPLATE: &str = "You are an AI assistant who has rich visual commonsense knowledge and strong reasoning abilities. You will be provided with:\n\
1. A target question about an image that you are trying to answer.\n\
2. Although you won't be able to directly view the image, you will receive a general caption that might not be entirely precise but will provide an overall description.\n\
3. You may receive some additional evidences about the image.\n\
Your goal is: To effectively analyze the image and select the correct answer for the question, you should break down the main question into several sub-questions that address the key aspects of the image.\n\
\n\
What you already know about the image:\n\
{evidences}\n\
\n\
Target question: {question}. Generate {k} sub-questions that might help you confirm whether the answer to the target question is '{answer}'.\n\
Here are the rules you should follow when listing the sub-questions:\n\
1. Ensure that each sub-question is independent. It means the latter sub-questions shouldn't mention previous sub-questions.\n\
2. The sub-questions should be separated by a newline character.\n\
3. Each sub-question should start with \"What\" or \"Is\".\n\
4. Each sub-question should be short (less than 10 words) and easy to understand.\n\
5. The sub-question are necessary to distinguish the correct answer.";

pub const PARAPHRASE_TEMPLATE: &str = "Rephrase the question and answer into a single statement.\n\
The re-phrased statement should summarize the question and answer.\n\
The re-phrased statement should not be a question.\n\
\n\
Question: Is the dog herding or guiding the cows?\n\
Answer: guiding\n\
Statement: The dog is guiding the cows.\n\
\n\
Question: Are there any other written numbers visible in the image?\n\
Answer: no\n\
Statement: There are no other written numbers visible in the image.\n\
\n\
Question: Which color of clothing is unique to just one of the two people here?\n\
Answer: black\n\
Statement: The color of clothing that is unique to just one of the two people here is black.\n\
\n\
Question: Does the picture on the screen involve any human subjects or animals?\n\
Answer: human\n\
Statement: The picture on the screen involves human subjects.\n\
\n\
Question: {question}\n\
Answer: {answer}\n\
Statement: ";

pub const NLI_TEMPLATE: &str = "Premise: {premise}\n\
\n\
Hypothesis: {hypothesis}\n\
Can we infer the hypothesis from the premise? Options: yes, no. Answer: ";

/// Substitutes every `{slot}` in the role's template.
pub fn render_prompt(role: Role, slots: &PromptSlots) -> Result<String> {
    let template = role.template();
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .expect("templates only contain balanced slot braces");
        let name = &after[..close];
        let value = slots.get(name).ok_or_else(|| Error::MissingSlot {
            role: role.as_str(),
            slot: name.to_string(),
        })?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Renders the question-generation prompt with one evidence statement per line.
pub fn render_qgen(question: &str, answer: &str, evidences: &[String], k: usize) -> String {
    let mut slots = PromptSlots::new();
    slots.insert("question".into(), question.into());
    slots.insert("answer".into(), answer.into());
    slots.insert("evidences".into(), evidences.join("\n"));
    slots.insert("k".into(), k.to_string());
    render_prompt(Role::Qgen, &slots).expect("all qgen slots provided")
}

fn strip_enumeration(line: &str) -> &str {
    let line = line.trim();
    for bullet in ["-", "\u{2022}", "*"] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return rest.trim_start();
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return rest.trim_start();
        }
    }
    line
}

/// Splits generator output into at most `k` sub-questions, dropping
/// enumeration markers, blank lines and header lines ending in a colon.
pub fn parse_subquestions(raw: &str, k: usize) -> Vec<String> {
    raw.lines()
        .map(strip_enumeration)
        .map(str::trim)
        .filter(|q| !q.is_empty() && !q.ends_with(':'))
        .take(k)
        .map(String::from)
        .collect()
}
