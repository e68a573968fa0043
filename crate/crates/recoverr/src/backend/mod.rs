//! Remote model backends over the HTTP chat-completion protocol, and the
//! content-addressed response cache in front of them.

mod cache;
mod http;

use std::path::Path;

use recoverr_core::confidence::VerificationLogits;
use recoverr_core::modelio::{yes_no_logits, ClientError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{CacheKey, CacheRecord, CachedBackend, OfflineBackend};
pub use http::{BackendConfig, HttpBackend};

/// Request roles; the five model roles plus the optional answer judge.
pub const ROLES: [&str; 6] = ["vlm_answer", "vlm_verify", "qgen", "paraphrase", "nli", "judge"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRequest {
    pub role: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Log-probabilities are required; a reply without them is a capability error.
    pub want_logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ClientRequest {
    pub fn new(role: &str, prompt: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            prompt: prompt.into(),
            image: None,
            temperature: 0.0,
            max_tokens: 32,
            want_logprobs: false,
            seed: None,
        }
    }

    pub fn with_image(mut self, image: &str) -> Self {
        self.image = Some(image.to_string());
        self
    }

    pub fn validate(&self, multimodal: bool) -> Result<(), ClientError> {
        if !ROLES.contains(&self.role.as_str()) {
            return Err(ClientError::new(
                recoverr_core::modelio::ClientErrorKind::Other,
                format!("unknown request role {:?}", self.role),
            ));
        }
        if self.prompt.is_empty() {
            return Err(ClientError::malformed("empty prompt"));
        }
        if multimodal && self.role.starts_with("vlm_") && self.image.is_none() {
            return Err(ClientError::malformed(format!("{} request without an image", self.role)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReply {
    pub text: String,
    /// Probability of every generated token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_probs: Option<Vec<(String, f64)>>,
    /// Top log-probabilities at the first generated position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<Vec<(String, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yes_no_logits: Option<VerificationLogits>,
}

impl ClientReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_probs: None,
            top_logprobs: None,
            yes_no_logits: None,
        }
    }

    /// Yes/no logits of the first position, or the reason they are missing.
    pub fn require_yes_no(&self) -> Result<VerificationLogits, ClientError> {
        if let Some(l) = self.yes_no_logits {
            return Ok(l);
        }
        match &self.top_logprobs {
            Some(top) => yes_no_logits(top),
            None => Err(ClientError::capability("backend returned no log-probabilities")),
        }
    }

    pub fn probabilities(&self) -> Option<Vec<f64>> {
        self.token_probs
            .as_ref()
            .map(|t| t.iter().map(|(_, p)| *p).collect())
    }
}

/// A chat-completion model behind some transport.
pub trait ChatBackend: Send + Sync {
    /// Backend name from the configuration; part of every cache key.
    fn id(&self) -> &str;
    fn model(&self) -> &str;
    fn multimodal(&self) -> bool;
    fn complete(&self, request: &ClientRequest) -> Result<ClientReply, ClientError>;
}

/// Hex SHA-256 of an image: file contents when `image` names a readable
/// file, the reference text otherwise.
pub fn image_digest(image: &str) -> String {
    match std::fs::read(Path::new(image)) {
        Ok(bytes) => hex::encode(Sha256::digest(&bytes)),
        Err(_) => hex::encode(Sha256::digest(image.as_bytes())),
    }
}
