//! Model clients backed by a chat-completion backend.

use std::sync::Arc;

use recoverr_core::math::derive_seed;
use recoverr_core::modelio::{
    render_prompt, ClientError, EntailmentModel, Paraphraser, PromptSlots, QgenRequest, QuestionGenerator, RawAnswer,
    Role, VisionLanguageModel, VisionTool,
};
use recoverr_core::self_prompt_confidence;

use crate::backend::{CachedBackend, ClientRequest};

pub const CAPTION_PROMPT: &str = "A short image caption:";

pub const JUDGE_PROMPT: &str = "Question: {question}\n\
Reference answers: {gold}\n\
Candidate answer: {answer}\n\
Does the candidate answer mean the same as one of the reference answers? Answer yes or no:";

fn slots(pairs: &[(&str, &str)]) -> PromptSlots {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn render(role: Role, pairs: &[(&str, &str)]) -> Result<String, ClientError> {
    render_prompt(role, &slots(pairs)).map_err(|e| ClientError::malformed(e.to_string()))
}

fn first_line(text: &str) -> &str {
    text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}

/// Probability of "yes" normalized over yes/no at the first position.
fn yes_probability(backend: &CachedBackend, request: &ClientRequest) -> Result<f64, ClientError> {
    let reply = backend.call(request)?;
    let logits = reply.require_yes_no()?;
    self_prompt_confidence(&logits)
        .map(|c| c.value())
        .map_err(|e| ClientError::malformed(e.to_string()))
}

/// Answers with a short greedy completion, then asks the same model whether
/// that answer is correct and keeps the yes/no logits.
pub struct ChatVlm {
    pub backend: Arc<CachedBackend>,
    pub max_answer_tokens: u32,
}

impl VisionLanguageModel for ChatVlm {
    fn answer(&self, image: &str, question: &str) -> Result<RawAnswer, ClientError> {
        let mut ask = ClientRequest::new(Role::VlmAnswer.as_str(), render(Role::VlmAnswer, &[("question", question)])?)
            .with_image(image);
        ask.max_tokens = self.max_answer_tokens;
        let reply = self.backend.call(&ask)?;
        let answer = first_line(&reply.text).to_string();
        if answer.is_empty() {
            return Err(ClientError::malformed(format!("empty answer to {question:?}")));
        }
        let mut verify = ClientRequest::new(
            Role::VlmVerify.as_str(),
            render(Role::VlmVerify, &[("question", question), ("answer", &answer)])?,
        )
        .with_image(image);
        verify.max_tokens = 1;
        verify.want_logprobs = true;
        let logits = self.backend.call(&verify)?.require_yes_no()?;
        Ok(RawAnswer {
            answer,
            logits: Some(logits),
            token_probs: reply.probabilities(),
        })
    }
}

/// Text-only sub-question generator; sampled, with a per-turn seed.
pub struct ChatQgen {
    pub backend: Arc<CachedBackend>,
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

impl QuestionGenerator for ChatQgen {
    fn generate(&self, request: &QgenRequest<'_>) -> Result<String, ClientError> {
        let mut req = ClientRequest::new(Role::Qgen.as_str(), request.prompt);
        req.temperature = self.temperature;
        req.max_tokens = self.max_tokens;
        req.seed = Some(derive_seed(
            self.seed,
            &[request.image, request.question, &request.turn.to_string()],
        ));
        Ok(self.backend.call(&req)?.text)
    }
}

pub struct ChatParaphraser {
    pub backend: Arc<CachedBackend>,
}

impl Paraphraser for ChatParaphraser {
    fn paraphrase(&self, question: &str, answer: &str) -> Result<String, ClientError> {
        let mut req = ClientRequest::new(
            Role::Paraphrase.as_str(),
            render(Role::Paraphrase, &[("question", question), ("answer", answer)])?,
        );
        req.max_tokens = 64;
        Ok(first_line(&self.backend.call(&req)?.text).to_string())
    }
}

pub struct ChatNli {
    pub backend: Arc<CachedBackend>,
}

impl EntailmentModel for ChatNli {
    fn entailment(&self, premise: &str, hypothesis: &str) -> Result<f64, ClientError> {
        let mut req = ClientRequest::new(
            Role::Nli.as_str(),
            render(Role::Nli, &[("premise", premise), ("hypothesis", hypothesis)])?,
        );
        req.max_tokens = 1;
        req.want_logprobs = true;
        yes_probability(&self.backend, &req)
    }
}

/// One-sentence caption from a vision-language backend.
pub struct ChatCaptionTool {
    pub name: String,
    pub backend: Arc<CachedBackend>,
}

impl VisionTool for ChatCaptionTool {
    fn name(&self) -> &str {
        &self.name
    }

    fn describe(&self, image: &str) -> Result<Vec<String>, ClientError> {
        let mut req = ClientRequest::new(Role::VlmAnswer.as_str(), CAPTION_PROMPT).with_image(image);
        req.max_tokens = 40;
        let caption = first_line(&self.backend.call(&req)?.text).to_string();
        Ok(if caption.is_empty() { Vec::new() } else { vec![caption] })
    }
}

/// Model-graded accuracy: 1 when the judge prefers "yes".
pub struct ChatJudge {
    pub backend: Arc<CachedBackend>,
}

impl ChatJudge {
    pub fn judge(&self, question: &str, answer: &str, gold: &[String]) -> Result<f64, ClientError> {
        let prompt = JUDGE_PROMPT
            .replace("{question}", question)
            .replace("{gold}", &gold.join("; "))
            .replace("{answer}", answer);
        let mut req = ClientRequest::new("judge", prompt);
        req.max_tokens = 1;
        req.want_logprobs = true;
        Ok(if yes_probability(&self.backend, &req)? >= 0.5 { 1.0 } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChatBackend, ClientReply};
    use std::sync::Mutex;

    /// Replies "yes"-leaning logprobs to verification prompts, echoes otherwise.
    struct Scripted {
        seen: Mutex<Vec<ClientRequest>>,
    }

    impl ChatBackend for Scripted {
        fn id(&self) -> &str {
            "scripted"
        }
        fn model(&self) -> &str {
            "m"
        }
        fn multimodal(&self) -> bool {
            true
        }
        fn complete(&self, request: &ClientRequest) -> Result<ClientReply, ClientError> {
            self.seen.lock().unwrap().push(request.clone());
            let mut reply = ClientReply::text(match request.role.as_str() {
                "vlm_answer" => "\n two \nextra",
                "paraphrase" => "The floor has two colors.\nQuestion: ...",
                _ => "yes",
            });
            if request.want_logprobs {
                reply.top_logprobs = Some(vec![(" Yes".into(), -0.105), ("no".into(), -2.303)]);
            }
            Ok(reply)
        }
    }

    fn backend() -> (Arc<Scripted>, Arc<CachedBackend>) {
        let inner = Arc::new(Scripted {
            seen: Mutex::new(Vec::new()),
        });
        let cached = Arc::new(CachedBackend::new(inner.clone(), None, 1));
        (inner, cached)
    }

    #[test]
    fn vlm_answers_then_verifies() {
        let (inner, b) = backend();
        let vlm = ChatVlm {
            backend: b,
            max_answer_tokens: 10,
        };
        let raw = vlm.answer("img.jpg", "How many colors?").unwrap();
        assert_eq!(raw.answer, "two");
        let c = self_prompt_confidence(&raw.logits.unwrap()).unwrap().value();
        assert!((c - 0.9).abs() < 0.01);
        let seen = inner.seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[1].prompt, "Question: How many colors?\nAnswer: two\nIs the given answer correct for the question? Answer yes or no:");
        assert_eq!(seen[1].image.as_deref(), Some("img.jpg"));
    }

    #[test]
    fn paraphrase_keeps_first_line_and_nli_reads_yes() {
        let (_, b) = backend();
        let p = ChatParaphraser { backend: b.clone() };
        assert_eq!(p.paraphrase("Q?", "a").unwrap(), "The floor has two colors.");
        let nli = ChatNli { backend: b };
        assert!((nli.entailment("P", "H").unwrap() - 0.9).abs() < 0.01);
    }

    #[test]
    fn qgen_seed_varies_by_turn() {
        let (inner, b) = backend();
        let q = ChatQgen {
            backend: b,
            temperature: 1.0,
            seed: 7,
            max_tokens: 256,
        };
        for turn in [1, 2] {
            let req = QgenRequest {
                image: "i",
                question: "Q",
                answer: "a",
                evidences: &[],
                asked: &[],
                k: 10,
                turn,
                prompt: "prompt",
            };
            q.generate(&req).unwrap();
        }
        let seen = inner.seen.lock().unwrap();
        assert_eq!(seen[0].temperature, 1.0);
        assert_ne!(seen[0].seed, seen[1].seed);
    }
}
