use std::path::Path;
use std::thread;
use std::time::Duration;

use base64::Engine;
use recoverr_core::modelio::{yes_no_logits, ClientError, ClientErrorKind};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatBackend, ClientReply, ClientRequest};

/// Number of alternatives requested at each generated position.
pub const TOP_LOGPROBS: u32 = 20;

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_retry_base_ms() -> u64 {
    500
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    /// Endpoint root; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    /// Upper bound on outstanding requests.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Accepts images as data-URI message parts.
    #[serde(default)]
    pub multimodal: bool,
}

impl BackendConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            retry_base_ms: default_retry_base_ms(),
            parallelism: default_parallelism(),
            multimodal: false,
        }
    }
}

pub struct HttpBackend {
    id: String,
    config: BackendConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(id: impl Into<String>, config: BackendConfig) -> Result<Self, ClientError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ClientError::new(ClientErrorKind::Other, format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            id: id.into(),
            config,
            api_key,
            agent,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn body(&self, request: &ClientRequest) -> Result<Value, ClientError> {
        let content = match (&request.image, self.config.multimodal) {
            (Some(image), true) => json!([
                { "type": "text", "text": request.prompt },
                { "type": "image_url", "image_url": { "url": data_uri(image)? } },
            ]),
            _ => Value::String(request.prompt.clone()),
        };
        let mut body = json!({
            "model": self.config.model,
            "messages": [{ "role": "user", "content": content }],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "logprobs": true,
            "top_logprobs": TOP_LOGPROBS,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }

    fn post_once(&self, body: &str) -> Result<(u16, String), ureq::Error> {
        let mut req = self.agent.post(&self.url()).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string()?;
        Ok((status, text))
    }

    /// Posts with exponential backoff on transport failures, 429 and 5xx.
    fn post(&self, body: &str) -> Result<String, ClientError> {
        let mut attempt = 0;
        loop {
            let failure = match self.post_once(body) {
                Ok((200..=299, text)) => return Ok(text),
                Ok((status @ (429 | 500..=599), text)) => format!("HTTP {status}: {}", snippet(&text)),
                Ok((status, text)) => {
                    return Err(ClientError::new(
                        ClientErrorKind::Other,
                        format!("HTTP {status}: {}", snippet(&text)),
                    ))
                }
                Err(e) => e.to_string(),
            };
            if attempt >= self.config.max_retries {
                return Err(ClientError::transport(format!(
                    "{} after {} attempts: {failure}",
                    self.url(),
                    attempt + 1
                )));
            }
            let wait = self.config.retry_base_ms.saturating_mul(1 << attempt.min(16));
            log::debug!("{}: retrying in {wait} ms after {failure}", self.id);
            thread::sleep(Duration::from_millis(wait));
            attempt += 1;
        }
    }
}

fn snippet(text: &str) -> &str {
    let end = text.char_indices().nth(200).map_or(text.len(), |(i, _)| i);
    &text[..end]
}

fn data_uri(image: &str) -> Result<String, ClientError> {
    if image.starts_with("data:") || image.starts_with("http://") || image.starts_with("https://") {
        return Ok(image.to_string());
    }
    let bytes = std::fs::read(image)
        .map_err(|e| ClientError::new(ClientErrorKind::Other, format!("cannot read image {image}: {e}")))?;
    let mime = match Path::new(image)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    };
    Ok(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Logprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

/// Decodes a chat-completion response body.
pub(crate) fn parse_completion(body: &str, want_logprobs: bool) -> Result<ClientReply, ClientError> {
    let completion: Completion =
        serde_json::from_str(body).map_err(|e| ClientError::malformed(format!("completion body: {e}")))?;
    let choice = completion
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| ClientError::malformed("completion has no choices"))?;
    let text = choice.message.content.unwrap_or_default();
    let tokens = choice.logprobs.and_then(|l| l.content).filter(|c| !c.is_empty());
    let Some(tokens) = tokens else {
        if want_logprobs {
            return Err(ClientError::capability("backend returned no log-probabilities"));
        }
        return Ok(ClientReply::text(text));
    };
    let token_probs: Vec<(String, f64)> = tokens.iter().map(|t| (t.token.clone(), t.logprob.exp())).collect();
    let mut top: Vec<(String, f64)> = tokens[0]
        .top_logprobs
        .iter()
        .map(|t| (t.token.clone(), t.logprob))
        .collect();
    if top.is_empty() {
        top.push((tokens[0].token.clone(), tokens[0].logprob));
    }
    let yes_no = yes_no_logits(&top).ok();
    Ok(ClientReply {
        text,
        token_probs: Some(token_probs),
        top_logprobs: Some(top),
        yes_no_logits: yes_no,
    })
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn model(&self) -> &str {
        &self.config.model
    }

    fn multimodal(&self) -> bool {
        self.config.multimodal
    }

    fn complete(&self, request: &ClientRequest) -> Result<ClientReply, ClientError> {
        request.validate(self.config.multimodal)?;
        let body = self.body(request)?.to_string();
        let text = self.post(&body)?;
        parse_completion(&text, request.want_logprobs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use recoverr_core::self_prompt_confidence;

    fn body(top: &str) -> String {
        format!(
            r#"{{"choices":[{{"message":{{"role":"assistant","content":"yes"}},
            "logprobs":{{"content":[{{"token":"yes","logprob":-0.105,"top_logprobs":{top}}}]}}}}]}}"#
        )
    }

    #[test]
    fn yes_no_from_first_position() {
        let reply = parse_completion(
            &body(r#"[{"token":"yes","logprob":-0.105},{"token":"no","logprob":-2.303}]"#),
            true,
        )
        .unwrap();
        let c = self_prompt_confidence(&reply.require_yes_no().unwrap()).unwrap();
        let expected = (-0.105f64).exp() / ((-0.105f64).exp() + (-2.303f64).exp());
        assert!((c.value() - expected).abs() < 1e-12);
        assert!((c.value() - 0.90).abs() < 0.01);
        assert!((reply.token_probs.unwrap()[0].1 - (-0.105f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn casing_variants_merge() {
        let reply = parse_completion(
            &body(r#"[{"token":"Yes","logprob":-1.0},{"token":" yes","logprob":-1.0},{"token":"No","logprob":-3.0}]"#),
            true,
        )
        .unwrap();
        let l = reply.require_yes_no().unwrap();
        assert!((l.logit_yes - (-1.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn missing_logprobs_when_required() {
        let plain = r#"{"choices":[{"message":{"content":"two"}}]}"#;
        assert_eq!(
            parse_completion(plain, true).unwrap_err().kind,
            ClientErrorKind::Capability
        );
        assert_eq!(parse_completion(plain, false).unwrap().text, "two");
        assert_eq!(
            parse_completion("{}", false).unwrap_err().kind,
            ClientErrorKind::Malformed
        );
    }

    #[test]
    fn image_parts_only_for_multimodal() {
        let mut cfg = BackendConfig::new("http://127.0.0.1:1", "m");
        let req = ClientRequest::new("vlm_verify", "Q").with_image("data:image/png;base64,AAAA");
        let text_only = HttpBackend::new("b", cfg.clone()).unwrap().body(&req).unwrap();
        assert!(text_only["messages"][0]["content"].is_string());
        cfg.multimodal = true;
        let mm = HttpBackend::new("b", cfg).unwrap().body(&req).unwrap();
        assert_eq!(mm["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,AAAA");
        assert_eq!(mm["top_logprobs"], TOP_LOGPROBS);
    }
}
