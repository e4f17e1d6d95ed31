//! Verifier variants: single-call baselines, the two-step self-grounded
//! verifier, monolithic retrieve-and-verify, and majority voting.

pub mod parse;
pub mod vote;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Completion, Gateway, GatewayError, SamplingParams};
use crate::model::{canonical_digest, Domain, State, Task, TokenUsage, Trajectory, Verdict, VerdictLabel};
use crate::prompt::{apply_objective_suffix, ChatMessage, EnvProfile, PromptAssembler, PromptError, PromptVariant};

pub use parse::{parse_label, parse_verdict, render_response, ParseError, ResponseFormat};

/// Reward alignment: only a full success earns reward.
pub fn reward(label: VerdictLabel) -> u8 {
    match label {
        VerdictLabel::Success => 1,
        VerdictLabel::PartialSuccess | VerdictLabel::Failure => 0,
    }
}

pub fn map_reward(v: &Verdict) -> u8 {
    reward(v.label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Two-way criteria, no reasoning slot.
    Binary,
    /// Three-way criteria; `cot` toggles the reasoning slot.
    Baseline,
    /// Task-specific rubric with a final-state snapshot.
    Pan,
    /// Separate prior-retrieval call, then grounded verification.
    Sgv,
    /// Like `Sgv` but the first call reuses the verifier system prompt.
    UnifiedSgv,
    /// Priors and verdict from one call.
    Monolithic,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(Method::Binary),
            "baseline" => Ok(Method::Baseline),
            "pan" => Ok(Method::Pan),
            "sgv" => Ok(Method::Sgv),
            "unified-sgv" | "unified_sgv" => Ok(Method::UnifiedSgv),
            "monolithic" => Ok(Method::Monolithic),
            _ => Err(format!("unknown verifier method `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierConfig {
    pub method: Method,
    pub cot: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voting_n: Option<u32>,
    pub verify_params: SamplingParams,
    pub first_step_params: SamplingParams,
    /// Highest state index the first step may see.
    #[serde(default)]
    pub framing_horizon: u32,
    #[serde(default = "one")]
    pub framing_screenshots: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Drops the reasoning instruction for models that reason natively.
    #[serde(default)]
    pub reasoning_model: bool,
}

fn one() -> usize {
    1
}

impl VerifierConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            cot: method != Method::Binary && method != Method::Pan,
            voting_n: None,
            verify_params: SamplingParams::verification(),
            first_step_params: SamplingParams::first_step(),
            framing_horizon: 0,
            framing_screenshots: 1,
            window: None,
            reasoning_model: false,
        }
    }

    pub fn with_cot(mut self, cot: bool) -> Self {
        self.cot = cot;
        self
    }

    /// Majority voting over `n` samples at the voting sampling settings.
    pub fn with_voting(mut self, n: u32) -> Self {
        self.voting_n = Some(n);
        self.verify_params = SamplingParams::voting(n);
        self
    }

    pub fn validate(&self) -> Result<(), VerifyError> {
        let bad = |m: &str| Err(VerifyError::Config(m.to_string()));
        if let Some(n) = self.voting_n {
            if n == 0 {
                return bad("voting needs at least one sample");
            }
            if self.verify_params.temperature == 0.0 && n > 1 {
                return bad("voting at temperature 0 yields identical samples");
            }
        }
        if self.method == Method::Binary && self.cot {
            return bad("the binary variant has no reasoning slot");
        }
        if self.method == Method::Pan && self.cot {
            return bad("the rubric variant has its own response format");
        }
        if self.framing_screenshots == 0 && matches!(self.method, Method::Sgv | Method::UnifiedSgv) {
            return bad("first step needs at least one framing screenshot");
        }
        Ok(())
    }

    pub fn effective_cot(&self) -> bool {
        self.cot && !self.reasoning_model
    }

    /// Short name used as the verdict key in stores and reports.
    pub fn label(&self) -> String {
        let mut s = match self.method {
            Method::Binary => "nocot-binary".to_string(),
            Method::Baseline if self.effective_cot() => "cot".into(),
            Method::Baseline => "nocot".into(),
            Method::Pan => "pan".into(),
            Method::Sgv => "sgv".into(),
            Method::UnifiedSgv => "unified-sgv".into(),
            Method::Monolithic => "monolithic".into(),
        };
        if matches!(self.method, Method::Sgv | Method::UnifiedSgv | Method::Monolithic) && self.effective_cot() {
            s.push_str("+cot");
        }
        if self.reasoning_model {
            s.push_str("+thinking");
        }
        if let Some(n) = self.voting_n {
            s.push_str(&format!("+vote{n}"));
        }
        s
    }

    pub fn digest(&self) -> String {
        canonical_digest(self)
    }
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid verifier config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("unparseable completion: {error}")]
    Unparseable { error: ParseError, raw: String },
    #[error("all {0} samples were unparseable")]
    AllUnparseable(u32),
    #[error("first step returned no priors")]
    EmptyPriors,
}

impl VerifyError {
    pub fn class(&self) -> &'static str {
        match self {
            VerifyError::Config(_) => "config",
            VerifyError::Prompt(_) => "prompt",
            VerifyError::Gateway(g) => g.class(),
            VerifyError::Unparseable { .. } | VerifyError::AllUnparseable(_) => "unparseable",
            VerifyError::EmptyPriors => "empty_priors",
        }
    }

    pub fn is_unparseable(&self) -> bool {
        self.class() == "unparseable"
    }
}

pub struct Verifier {
    gateway: Arc<Gateway>,
    prompts: Arc<PromptAssembler>,
    config: VerifierConfig,
}

impl Verifier {
    pub fn new(
        gateway: Arc<Gateway>,
        prompts: Arc<PromptAssembler>,
        config: VerifierConfig,
    ) -> Result<Self, VerifyError> {
        config.validate()?;
        Ok(Self { gateway, prompts, config })
    }

    pub fn config(&self) -> &VerifierConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// Runs the configured variant end to end.
    pub fn verify(&self, task: &Task, trajectory: &Trajectory) -> Result<Verdict, VerifyError> {
        if trajectory.steps.is_empty() {
            return Err(PromptError::EmptyTrajectory.into());
        }
        let task = apply_objective_suffix(task);
        let profile = EnvProfile::for_domain(task.domain);
        if profile == EnvProfile::Robomimic {
            return self.verify_robomimic(&task, trajectory);
        }
        let cot = self.config.effective_cot();
        let window = self.config.window;
        let p = &self.prompts;
        match self.config.method {
            Method::Baseline | Method::Binary | Method::Pan | Method::Monolithic => {
                let (variant, format) = match self.config.method {
                    Method::Binary => (PromptVariant::NoCoTBinary, ResponseFormat::Standard),
                    Method::Baseline if cot => (PromptVariant::CoT, ResponseFormat::Standard),
                    Method::Baseline => (PromptVariant::NoCoT, ResponseFormat::Standard),
                    Method::Pan => (PromptVariant::PanRubric, ResponseFormat::Pan),
                    _ => (PromptVariant::MonolithicRetrieveVerify, ResponseFormat::Monolithic),
                };
                let msgs = p.render_verification(profile, variant, cot, &task, trajectory, None, window)?;
                self.final_step(&msgs, format)
            }
            Method::Sgv | Method::UnifiedSgv => {
                let (priors, first_usage) = self.retrieve_priors(&task, trajectory)?;
                let msgs = p.render_verification(
                    profile,
                    PromptVariant::SGVSecondStep,
                    cot,
                    &task,
                    trajectory,
                    Some(&priors),
                    window,
                )?;
                let mut v = self.final_step(&msgs, ResponseFormat::Standard)?;
                v.priors = Some(priors);
                v.usage += first_usage;
                Ok(v)
            }
        }
    }

    /// Framing states for the first step: the earliest states within the
    /// framing horizon.
    pub fn framing_states(&self, trajectory: &Trajectory) -> Vec<State> {
        trajectory
            .steps
            .iter()
            .map(|s| &s.state)
            .filter(|s| s.index <= self.config.framing_horizon)
            .take(self.config.framing_screenshots)
            .cloned()
            .collect()
    }

    /// First step: priors conditioned only on task-framing data.
    pub fn retrieve_priors(&self, task: &Task, trajectory: &Trajectory) -> Result<(String, TokenUsage), VerifyError> {
        let profile = EnvProfile::for_domain(task.domain);
        let framing = self.framing_states(trajectory);
        let horizon = self.config.framing_horizon;
        let msgs = match self.config.method {
            Method::UnifiedSgv => self.prompts.render_unified_first_step_prompt(profile, task, &framing, horizon)?,
            _ => self.prompts.render_first_step_prompt(profile, task, &framing, horizon)?,
        };
        let c = self.gateway.complete(&msgs, &self.config.first_step_params)?;
        let priors = c.text.trim().to_string();
        if priors.is_empty() {
            return Err(VerifyError::EmptyPriors);
        }
        Ok((priors, c.usage))
    }

    fn verify_robomimic(&self, task: &Task, trajectory: &Trajectory) -> Result<Verdict, VerifyError> {
        let first = &trajectory.steps[0].state;
        let current = &trajectory.steps.last().expect("non-empty").state;
        let stamp = (current.index, Domain::Robomimic.max_steps() as u32);
        let p = &self.prompts;
        match self.config.method {
            Method::Baseline => {
                let msgs = p.render_robomimic(PromptVariant::RobomimicNoSGV, task, current, stamp, None)?;
                self.final_step(&msgs, ResponseFormat::Robomimic)
            }
            Method::Sgv | Method::UnifiedSgv => {
                let msgs = p.render_robomimic(PromptVariant::RobomimicSGVFirst, task, first, stamp, None)?;
                let c = self.gateway.complete(&msgs, &self.config.first_step_params)?;
                let priors = c.text.trim().to_string();
                if priors.is_empty() {
                    return Err(VerifyError::EmptyPriors);
                }
                let msgs =
                    p.render_robomimic(PromptVariant::RobomimicSGVSecond, task, current, stamp, Some(&priors))?;
                let mut v = self.final_step(&msgs, ResponseFormat::Robomimic)?;
                v.priors = Some(priors);
                v.usage += c.usage;
                Ok(v)
            }
            m => Err(VerifyError::Config(format!("{m:?} is not available for manipulation tasks"))),
        }
    }

    fn final_step(&self, msgs: &[ChatMessage], format: ResponseFormat) -> Result<Verdict, VerifyError> {
        match self.config.voting_n {
            None => {
                let c = self.gateway.complete(msgs, &self.config.verify_params)?;
                let mut v = parse_verdict(&c.text, format)
                    .map_err(|error| VerifyError::Unparseable { error, raw: c.text.clone() })?;
                v.usage = c.usage;
                Ok(v)
            }
            Some(n) => {
                let params = SamplingParams { n, ..self.config.verify_params.clone() };
                let results = self.gateway.complete_n(msgs, &params);
                let mut usage = TokenUsage::default();
                let mut first_gateway_error = None;
                let samples: Vec<Result<Verdict, ParseError>> = results
                    .into_iter()
                    .map(|r: Result<Completion, GatewayError>| match r {
                        Ok(c) => {
                            usage += c.usage;
                            parse_verdict(&c.text, format)
                        }
                        Err(e) => {
                            log::warn!("voting sample failed: {e}");
                            first_gateway_error.get_or_insert(e);
                            Err(ParseError::Empty)
                        }
                    })
                    .collect();
                let unparseable = samples.iter().filter(|s| s.is_err()).count();
                if unparseable > 0 {
                    log::info!("{unparseable} of {n} voting samples produced no label");
                }
                match vote::combine(&samples) {
                    Some(mut v) => {
                        v.usage = usage;
                        Ok(v)
                    }
                    None => Err(match first_gateway_error {
                        Some(e) if samples.len() == 1 => e.into(),
                        _ => VerifyError::AllUnparseable(n),
                    }),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_alignment() {
        let r: Vec<u8> =
            [VerdictLabel::Success, VerdictLabel::PartialSuccess, VerdictLabel::Failure].map(reward).to_vec();
        assert_eq!(r, vec![1, 0, 0]);
    }

    #[test]
    fn config_rules() {
        assert!(VerifierConfig::new(Method::Baseline).validate().is_ok());
        assert!(VerifierConfig::new(Method::Binary).with_cot(true).validate().is_err());
        let mut v = VerifierConfig::new(Method::Baseline).with_voting(8);
        assert!(v.validate().is_ok());
        v.verify_params.temperature = 0.0;
        assert!(v.validate().is_err());
    }

    #[test]
    fn labels_name_the_table_rows() {
        assert_eq!(VerifierConfig::new(Method::Binary).label(), "nocot-binary");
        assert_eq!(VerifierConfig::new(Method::Baseline).with_cot(false).label(), "nocot");
        assert_eq!(VerifierConfig::new(Method::Baseline).with_voting(8).label(), "cot+vote8");
        assert_eq!(VerifierConfig::new(Method::Sgv).label(), "sgv+cot");
        assert_eq!(VerifierConfig::new(Method::Sgv).with_cot(false).label(), "sgv");
        let mut thinking = VerifierConfig::new(Method::Sgv);
        thinking.reasoning_model = true;
        assert_eq!(thinking.label(), "sgv+thinking");
    }
}
