//! Uniform access to chat-completion backends.
//!
//! A [`Gateway`] wraps one [`Backend`] with retries, an in-flight request
//! cap, call counting, token accounting and an optional transcript log.

mod image;
mod mock;

#[cfg(feature = "http")]
mod http;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{canonical_digest, TokenUsage};
use crate::prompt::{ChatMessage, Part};

pub use self::image::{encode_image, EncodedImage, ImageError};
#[cfg(feature = "http")]
pub use http::{BackendConfig, HttpBackend};
pub use mock::{MockBackend, ResponseFn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thinking_budget: Option<u32>,
    pub n: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub const THINKING_BUDGET: u32 = 8192;
pub const THINKING_BUDGET_HIGH: u32 = 24576;

impl SamplingParams {
    /// Offline verification: greedy decoding.
    pub fn verification() -> Self {
        Self { temperature: 0.0, top_p: 1.0, top_k: None, max_tokens: 4096, thinking_budget: None, n: 1, seed: None }
    }

    /// Prior retrieval: provider defaults.
    pub fn first_step() -> Self {
        Self { temperature: 1.0, top_p: 0.95, top_k: Some(64), ..Self::verification() }
    }

    /// Majority voting over `n` samples.
    pub fn voting(n: u32) -> Self {
        Self { temperature: 1.5, top_p: 0.95, top_k: Some(64), n, ..Self::verification() }
    }

    pub fn with_thinking(mut self, budget: u32) -> Self {
        self.thinking_budget = Some(budget);
        self
    }

    // negated comparisons so that NaN is rejected
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if self.top_k == Some(0) {
            return bad("top_k must be positive");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: TokenUsage,
    pub backend_id: String,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("payload too large: {0}")]
    Oversize(String),
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("timed out after {attempts} attempts: {last}")]
    Timeout { attempts: u32, last: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl GatewayError {
    pub fn is_transient(&self) -> bool {
        matches!(self, GatewayError::Transient(_))
    }

    /// Short class name for run-log rows.
    pub fn class(&self) -> &'static str {
        match self {
            GatewayError::Auth(_) => "auth",
            GatewayError::Oversize(_) => "oversize",
            GatewayError::Transient(_) | GatewayError::Timeout { .. } => "timeout",
            GatewayError::InvalidRequest(_) => "invalid_request",
            GatewayError::Backend(_) => "backend",
            GatewayError::Image(_) => "image",
        }
    }
}

/// A chat-completion provider. `sample_index` distinguishes the samples of
/// one `complete_n` call.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn supports_thinking(&self) -> bool {
        false
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
        sample_index: u32,
    ) -> Result<Completion, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_backoff_ms: 500 }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { max_attempts: 1, base_backoff_ms: 0 }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_backoff_ms.saturating_mul(1 << attempt.min(16)))
    }
}

/// Counting semaphore bounding concurrent backend requests.
#[derive(Debug)]
struct InFlight {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(cap: usize) -> Self {
        Self { cap: cap.max(1), used: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("in-flight lock");
        while *used >= self.cap {
            used = self.freed.wait(used).expect("in-flight lock");
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().expect("in-flight lock");
        *used -= 1;
        self.0.freed.notify_one();
    }
}

/// Stable digest of a message list; images contribute their locator.
pub fn prompt_digest(messages: &[ChatMessage]) -> String {
    canonical_digest(&messages)
}

/// Rough token estimate used by offline backends: 4 characters per token,
/// a flat cost per image.
pub fn estimate_tokens(messages: &[ChatMessage]) -> u64 {
    messages
        .iter()
        .flat_map(|m| m.parts.iter())
        .map(|p| match p {
            Part::Text(t) => text_tokens(t),
            Part::Image(_) => 258,
        })
        .sum()
}

pub fn text_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Serialize)]
struct LogEntry<'a> {
    backend: &'a str,
    prompt_digest: String,
    sample_index: u32,
    params: &'a SamplingParams,
    messages: &'a [ChatMessage],
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

struct TranscriptLog {
    file: Mutex<File>,
    secrets: Vec<String>,
}

impl TranscriptLog {
    fn redact(&self, mut line: String) -> String {
        for s in &self.secrets {
            if !s.is_empty() {
                line = line.replace(s.as_str(), "[REDACTED]");
            }
        }
        line
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    in_flight: InFlight,
    calls: AtomicU64,
    attempts: AtomicU64,
    usage: Mutex<TokenUsage>,
    log: Option<TranscriptLog>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("calls", &self.calls())
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            in_flight: InFlight::new(8),
            calls: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
            usage: Mutex::new(TokenUsage::default()),
            log: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, cap: usize) -> Self {
        self.in_flight = InFlight::new(cap);
        self
    }

    /// Appends every request/response to `path` as JSON lines. Any of
    /// `secrets` appearing in a line is replaced before writing.
    pub fn with_transcript_log(mut self, path: &Path, secrets: Vec<String>) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.log = Some(TranscriptLog { file: Mutex::new(file), secrets });
        Ok(self)
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// Logical completions requested so far (one per sample).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Wire attempts including retries.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    pub fn usage(&self) -> TokenUsage {
        *self.usage.lock().expect("usage lock")
    }

    pub fn complete(&self, messages: &[ChatMessage], params: &SamplingParams) -> Result<Completion, GatewayError> {
        let params = SamplingParams { n: 1, ..params.clone() };
        self.sample(messages, &self.effective(params)?, 0)
    }

    /// Exactly `params.n` results in sample order; failures are reported
    /// per sample.
    pub fn complete_n(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Vec<Result<Completion, GatewayError>> {
        let n = params.n.max(1);
        match self.effective(params.clone()) {
            Ok(p) => (0..n).map(|i| self.sample(messages, &p, i)).collect(),
            Err(e) => (0..n).map(|_| Err(e.clone())).collect(),
        }
    }

    fn effective(&self, mut params: SamplingParams) -> Result<SamplingParams, GatewayError> {
        params.validate()?;
        if params.thinking_budget.is_some() && !self.backend.supports_thinking() {
            log::warn!("backend {} has no thinking budget; ignoring it", self.backend.id());
            params.thinking_budget = None;
        }
        Ok(params)
    }

    fn sample(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
        index: u32,
    ) -> Result<Completion, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let attempts = self.retry.max_attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.backoff(attempt - 1));
            }
            self.attempts.fetch_add(1, Ordering::SeqCst);
            let result = {
                let _permit = self.in_flight.acquire();
                self.backend.complete(messages, params, index)
            };
            match result {
                Ok(c) => {
                    *self.usage.lock().expect("usage lock") += c.usage;
                    self.write_log(messages, params, index, Some(&c.text), None);
                    return Ok(c);
                }
                Err(e) if e.is_transient() => {
                    log::debug!("transient failure on attempt {}: {e}", attempt + 1);
                    last = Some(e);
                }
                Err(e) => {
                    self.write_log(messages, params, index, None, Some(e.to_string()));
                    return Err(e);
                }
            }
        }
        let last = last.map(|e| e.to_string()).unwrap_or_default();
        let err = GatewayError::Timeout { attempts, last };
        self.write_log(messages, params, index, None, Some(err.to_string()));
        Err(err)
    }

    fn write_log(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
        sample_index: u32,
        response: Option<&str>,
        error: Option<String>,
    ) {
        let Some(log) = &self.log else { return };
        let entry = LogEntry {
            backend: self.backend.id(),
            prompt_digest: prompt_digest(messages),
            sample_index,
            params,
            messages,
            response,
            error,
        };
        let Ok(line) = serde_json::to_string(&entry) else { return };
        let line = log.redact(line);
        let mut f = log.file.lock().expect("log lock");
        if let Err(e) = writeln!(f, "{line}") {
            log::warn!("transcript log write failed: {e}");
        }
    }
}
