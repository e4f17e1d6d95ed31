//! OpenAI-compatible chat-completions backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{encode_image, Backend, Completion, FinishReason, GatewayError, RetryPolicy, SamplingParams};
use crate::model::TokenUsage;
use crate::prompt::{ChatMessage, Part, Role};
use crate::store::ImageRoot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key. The key itself is never
    /// stored in configs or manifests.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub supports_thinking: bool,
    /// Reasoning models get no chain-of-thought instruction.
    #[serde(default)]
    pub reasoning_model: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_image_dim: Option<u32>,
}

fn default_key_env() -> String {
    "TRAJVERIFY_API_KEY".into()
}

fn default_timeout() -> u64 {
    120
}

fn default_in_flight() -> usize {
    8
}

impl BackendConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
            max_in_flight: default_in_flight(),
            supports_thinking: false,
            reasoning_model: false,
            max_image_dim: None,
        }
    }

    pub fn api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_env).ok().filter(|k| !k.is_empty())
    }
}

pub struct HttpBackend {
    id: String,
    config: BackendConfig,
    images: ImageRoot,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: BackendConfig, images: ImageRoot) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Backend(e.to_string()))?;
        let api_key = config.api_key();
        Ok(Self { id: format!("http:{}", config.model), config, images, client, api_key })
    }

    /// Secrets to scrub from transcript logs.
    pub fn secrets(&self) -> Vec<String> {
        self.api_key.iter().cloned().collect()
    }

    pub fn request_body(&self, messages: &[ChatMessage], params: &SamplingParams) -> Result<Value, GatewayError> {
        let mut wire = Vec::with_capacity(messages.len());
        for m in messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            let content = if m.parts.iter().all(|p| matches!(p, Part::Text(_))) {
                Value::String(m.text())
            } else {
                let mut parts = Vec::with_capacity(m.parts.len());
                for p in &m.parts {
                    parts.push(match p {
                        Part::Text(t) => json!({"type": "text", "text": t}),
                        Part::Image(img) => {
                            let enc = encode_image(&self.images, img, self.config.max_image_dim)?;
                            json!({"type": "image_url", "image_url": {"url": enc.url()}})
                        }
                    });
                }
                Value::Array(parts)
            };
            wire.push(json!({"role": role, "content": content}));
        }
        let mut body = json!({
            "model": self.config.model,
            "messages": wire,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        });
        let obj = body.as_object_mut().expect("object literal");
        if let Some(k) = params.top_k {
            obj.insert("top_k".into(), json!(k));
        }
        if let Some(s) = params.seed {
            obj.insert("seed".into(), json!(s));
        }
        if let Some(b) = params.thinking_budget {
            obj.insert("thinking_budget".into(), json!(b));
        }
        Ok(body)
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports_thinking(&self) -> bool {
        self.config.supports_thinking
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
        sample_index: u32,
    ) -> Result<Completion, GatewayError> {
        let mut params = params.clone();
        // distinct seeds keep samples independent on providers that honour seeds
        params.seed = params.seed.map(|s| s.wrapping_add(u64::from(sample_index)));
        let body = self.request_body(messages, &params)?;
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let mut req = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                GatewayError::Transient(e.to_string())
            } else {
                GatewayError::Backend(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| GatewayError::Transient(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(GatewayError::Auth(format!("HTTP {status}"))),
            413 => return Err(GatewayError::Oversize(format!("HTTP {status}"))),
            408 | 429 | 500..=599 => return Err(GatewayError::Transient(format!("HTTP {status}"))),
            _ => return Err(GatewayError::InvalidRequest(format!("HTTP {status}: {}", truncate(&text, 200)))),
        }
        let wire: WireResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::Backend(format!("bad response body: {e}")))?;
        let choice = wire.choices.into_iter().next().ok_or_else(|| GatewayError::Backend("no choices".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Stop,
        };
        let content = choice.message.content.unwrap_or_default();
        let usage = wire
            .usage
            .map(|u| TokenUsage { prompt: u.prompt_tokens, output: u.completion_tokens })
            .unwrap_or_default();
        Ok(Completion { text: content, finish_reason, usage, backend_id: self.id.clone() })
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
