use std::collections::HashMap;

use super::{estimate_tokens, prompt_digest, text_tokens, Backend, Completion, FinishReason, GatewayError, SamplingParams};
use crate::model::TokenUsage;
use crate::prompt::ChatMessage;

pub type ResponseFn = dyn Fn(&[ChatMessage], u32) -> Result<String, GatewayError> + Send + Sync;

enum Mode {
    Scripted { scripts: HashMap<String, Vec<String>>, fallback: Option<Vec<String>> },
    Programmatic(Box<ResponseFn>),
}

/// Deterministic offline backend. The response is a pure function of the
/// prompt digest and the sample index.
pub struct MockBackend {
    id: String,
    mode: Mode,
    thinking: bool,
}

impl MockBackend {
    pub fn scripted(id: impl Into<String>) -> Self {
        Self { id: id.into(), mode: Mode::Scripted { scripts: HashMap::new(), fallback: None }, thinking: false }
    }

    pub fn programmatic(
        id: impl Into<String>,
        f: impl Fn(&[ChatMessage], u32) -> Result<String, GatewayError> + Send + Sync + 'static,
    ) -> Self {
        Self { id: id.into(), mode: Mode::Programmatic(Box::new(f)), thinking: false }
    }

    pub fn constant(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self::scripted(id).with_fallback(vec![text.into()])
    }

    /// Responses for a prompt, indexed by sample (cycled when shorter).
    pub fn script(mut self, messages: &[ChatMessage], responses: Vec<String>) -> Self {
        self.script_digest(prompt_digest(messages), responses);
        self
    }

    pub fn script_digest(&mut self, digest: String, responses: Vec<String>) {
        if let Mode::Scripted { scripts, .. } = &mut self.mode {
            scripts.insert(digest, responses);
        }
    }

    pub fn with_fallback(mut self, responses: Vec<String>) -> Self {
        if let Mode::Scripted { fallback, .. } = &mut self.mode {
            *fallback = Some(responses);
        }
        self
    }

    pub fn with_thinking(mut self) -> Self {
        self.thinking = true;
        self
    }

    fn respond(&self, messages: &[ChatMessage], index: u32) -> Result<String, GatewayError> {
        match &self.mode {
            Mode::Programmatic(f) => f(messages, index),
            Mode::Scripted { scripts, fallback } => {
                let digest = prompt_digest(messages);
                let list = scripts
                    .get(&digest)
                    .or(fallback.as_ref())
                    .ok_or_else(|| GatewayError::Backend(format!("no scripted response for prompt {digest}")))?;
                if list.is_empty() {
                    return Err(GatewayError::Backend("empty script".into()));
                }
                Ok(list[index as usize % list.len()].clone())
            }
        }
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports_thinking(&self) -> bool {
        self.thinking
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        _params: &SamplingParams,
        sample_index: u32,
    ) -> Result<Completion, GatewayError> {
        let text = self.respond(messages, sample_index)?;
        let usage = TokenUsage { prompt: estimate_tokens(messages), output: text_tokens(&text) };
        Ok(Completion { text, finish_reason: FinishReason::Stop, usage, backend_id: self.id.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Gateway;
    use crate::prompt::Part;
    use std::sync::Arc;

    fn prompt(s: &str) -> Vec<ChatMessage> {
        vec![ChatMessage::user(vec![Part::text(s)])]
    }

    #[test]
    fn scripted_samples_come_back_in_order() {
        let responses: Vec<String> = (0..8).map(|i| format!("r{i}")).collect();
        let gw = Gateway::new(Arc::new(MockBackend::scripted("m").script(&prompt("q"), responses.clone())));
        let out: Vec<String> =
            gw.complete_n(&prompt("q"), &SamplingParams::voting(8)).into_iter().map(|c| c.unwrap().text).collect();
        assert_eq!(out, responses);
        let single = gw.complete_n(&prompt("q"), &SamplingParams::verification());
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].as_ref().unwrap(), &gw.complete(&prompt("q"), &SamplingParams::verification()).unwrap());
    }

    #[test]
    fn repeated_calls_are_identical() {
        let gw = Gateway::new(Arc::new(MockBackend::scripted("m").script(&prompt("q"), vec!["a".into()])));
        let p = SamplingParams::verification();
        assert_eq!(gw.complete(&prompt("q"), &p).unwrap(), gw.complete(&prompt("q"), &p).unwrap());
    }

    #[test]
    fn unscripted_prompt_is_an_error() {
        let gw = Gateway::new(Arc::new(MockBackend::scripted("m")));
        assert!(matches!(
            gw.complete(&prompt("q"), &SamplingParams::verification()),
            Err(GatewayError::Backend(_))
        ));
    }

    #[test]
    fn partial_failures_are_reported_per_sample() {
        let backend = MockBackend::programmatic("m", |_, i| {
            if i == 2 || i == 5 {
                Err(GatewayError::Backend(format!("sample {i} failed")))
            } else {
                Ok(format!("s{i}"))
            }
        });
        let gw = Gateway::new(Arc::new(backend));
        let out = gw.complete_n(&prompt("q"), &SamplingParams::voting(8));
        assert_eq!(out.len(), 8);
        assert_eq!(out.iter().filter(|r| r.is_ok()).count(), 6);
        assert!(out[2].is_err() && out[5].is_err());
        assert_eq!(out[3].as_ref().unwrap().text, "s3");
    }
}
