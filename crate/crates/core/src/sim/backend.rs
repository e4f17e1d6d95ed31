use std::collections::HashMap;
use std::sync::Arc;

use super::catalog::SimCatalog;
use super::env::SimAction;
use super::task::{mock_completion, replay, MockKind, SimTaskSpec};
use crate::gateway::{estimate_tokens, text_tokens, Backend, Completion, FinishReason, GatewayError, SamplingParams};
use crate::model::{TokenUsage, VerdictLabel};
use crate::prompt::{ChatMessage, Role};

/// Answer to every first-step request.
pub const PRIORS_TEXT: &str = "Tasks like this are usually done in four steps. 1. Search for the product category. \
2. Sort the results by price, lowest first. 3. Open the candidate items and inspect their attributes. \
4. Only then add the item to the cart, navigate to it, or report the count.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimBackendMode {
    Fixed(MockKind),
    /// Biased unless the conversation carries the first-step priors.
    PriorSensitive,
}

/// Deterministic stand-in model for sim tasks. It recovers the task from
/// the objective line and replays the assistant turns in a fresh
/// environment.
pub struct SimBackend {
    id: String,
    mode: SimBackendMode,
    catalog: Arc<SimCatalog>,
    specs: HashMap<String, SimTaskSpec>,
}

impl SimBackend {
    pub fn new(mode: SimBackendMode, catalog: Arc<SimCatalog>, specs: impl IntoIterator<Item = SimTaskSpec>) -> Self {
        let specs = specs.into_iter().map(|s| (s.objective(), s)).collect();
        let id = match mode {
            SimBackendMode::Fixed(k) => format!("sim:{k:?}").to_lowercase(),
            SimBackendMode::PriorSensitive => "sim:prior-sensitive".into(),
        };
        Self { id, mode, catalog, specs }
    }

    /// Knows every task the catalog can generate.
    pub fn for_catalog(mode: SimBackendMode, catalog: Arc<SimCatalog>) -> Self {
        let specs = SimTaskSpec::all(&catalog);
        Self::new(mode, catalog, specs)
    }

    fn respond(&self, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        let texts: Vec<String> = messages.iter().map(ChatMessage::text).collect();
        if !texts.iter().any(|t| t.contains("EVALUATION:") || t.contains("Status:")) {
            return Ok(PRIORS_TEXT.to_string());
        }
        let objective = texts
            .iter()
            .flat_map(|t| t.lines())
            .find_map(|l| l.strip_prefix("## OBJECTIVE: ").or_else(|| l.strip_prefix("## User Intent: ")))
            .ok_or_else(|| GatewayError::InvalidRequest("no objective in request".into()))?
            .trim();
        let spec = self
            .specs
            .get(objective)
            .ok_or_else(|| GatewayError::InvalidRequest(format!("unknown sim objective `{objective}`")))?;
        let actions: Vec<&str> = messages
            .iter()
            .zip(&texts)
            .filter(|(m, t)| m.role == Role::Assistant && SimAction::parse(t).is_some())
            .map(|(_, t)| t.as_str())
            .collect();
        let kind = match self.mode {
            SimBackendMode::Fixed(k) => k,
            SimBackendMode::PriorSensitive if texts.iter().any(|t| t.contains(PRIORS_TEXT)) => MockKind::Grounded,
            SimBackendMode::PriorSensitive => MockKind::Biased,
        };
        let env = replay(self.catalog.clone(), actions);
        let standard = mock_completion(kind, spec, &env).map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        let system = texts.first().map(String::as_str).unwrap_or("");
        if system.contains("Status: \"success\"") {
            let success = standard.contains("EVALUATION: SUCCESS");
            let status = if success { VerdictLabel::Success } else { VerdictLabel::Failure };
            return Ok(format!(
                "Thoughts: Replayed the action history.\nStatus: \"{}\"",
                status.as_prompt_str().to_lowercase()
            ));
        }
        if texts.iter().any(|t| t.contains("GENERAL WEB KNOWLEDGE:") || t.contains("GENERAL COMPUTER KNOWLEDGE:")) {
            return Ok(format!("GENERAL WEB KNOWLEDGE: {PRIORS_TEXT}\n{standard}"));
        }
        Ok(standard)
    }
}

impl Backend for SimBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports_thinking(&self) -> bool {
        true
    }

    fn complete(&self, messages: &[ChatMessage], _params: &SamplingParams, _sample: u32) -> Result<Completion, GatewayError> {
        let text = self.respond(messages)?;
        let usage = TokenUsage { prompt: estimate_tokens(messages), output: text_tokens(&text) };
        Ok(Completion { text, finish_reason: FinishReason::Stop, usage, backend_id: self.id.clone() })
    }
}
