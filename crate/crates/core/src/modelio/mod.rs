//! Interfaces to the models the verification loop consults.
//!
//! Every model is reached through a small trait so the loop can run against
//! hosted chat-completion backends, local stand-ins or the synthetic world
//! alike. Prompt rendering and reply parsing are pure and live here too.

mod clients;
mod logprobs;
mod prompt;

pub use clients::{
    ClientError, ClientErrorKind, EntailmentModel, Negator, Paraphraser, QgenRequest,
    QuestionGenerator, RawAnswer, TextNegator, VisionLanguageModel, VisionTool,
};
pub use logprobs::yes_no_logits;
pub use prompt::{
    parse_subquestions, render_prompt, render_qgen, PromptSlots, Role, NLI_TEMPLATE,
    PARAPHRASE_TEMPLATE, QGEN_TEMPLATE, VERIFY_TEMPLATE, VLM_ANSWER_TEMPLATE,
};
