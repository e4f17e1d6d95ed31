//! Canonical records: tasks, trajectories, verdicts and run manifests.
//!
//! Every record type serializes to a single canonical JSON line (field order
//! is fixed by the struct definitions) so that `encode(decode(line)) == line`.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Version stamped on every persisted record line.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InvariantError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("oracle label must be 0 or 1, got {0}")]
    OracleLabel(u8),
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("state index {next} does not follow {prev}")]
    NonIncreasingIndex { prev: u32, next: u32 },
    #[error("state {0} has neither a screenshot nor a text observation")]
    EmptyState(u32),
    #[error("step {0} has an empty parsed action")]
    EmptyAction(u32),
    #[error("trajectory has {len} steps, limit for {domain} is {max}")]
    TooManySteps { domain: Domain, len: usize, max: usize },
    #[error("score must be 0 or 1, got {0}")]
    Score(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Classifieds,
    Reddit,
    Shopping,
    Osworld,
    Robomimic,
    Sim,
}

impl Domain {
    pub const ALL: [Domain; 6] = [
        Domain::Classifieds,
        Domain::Reddit,
        Domain::Shopping,
        Domain::Osworld,
        Domain::Robomimic,
        Domain::Sim,
    ];

    /// Step limit used by the online experiments for this environment.
    pub fn max_steps(self) -> usize {
        match self {
            Domain::Classifieds | Domain::Reddit | Domain::Shopping | Domain::Sim => 30,
            Domain::Osworld => 50,
            Domain::Robomimic => 700,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Classifieds => "classifieds",
            Domain::Reddit => "reddit",
            Domain::Shopping => "shopping",
            Domain::Osworld => "osworld",
            Domain::Robomimic => "robomimic",
            Domain::Sim => "sim",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown domain `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    /// Path relative to the run directory, absolute path, or http(s) URL.
    pub uri: String,
    pub media_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl ImageRef {
    pub fn new(uri: impl Into<String>, media_type: impl Into<String>) -> Self {
        Self { uri: uri.into(), media_type: media_type.into(), caption: None }
    }

    pub fn png(uri: impl Into<String>) -> Self {
        Self::new(uri, "image/png")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub domain: Domain,
    pub objective_text: String,
    #[serde(default)]
    pub objective_images: Vec<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective_suffix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_label: Option<u8>,
}

impl Task {
    pub fn new(id: impl Into<String>, domain: Domain, objective: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            domain,
            objective_text: objective.into(),
            objective_images: Vec::new(),
            objective_suffix: None,
            oracle_label: None,
        }
    }

    pub fn with_oracle(mut self, label: u8) -> Self {
        self.oracle_label = Some(label);
        self
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.id.trim().is_empty() {
            return Err(InvariantError::Empty("task id"));
        }
        if self.objective_text.trim().is_empty() {
            return Err(InvariantError::Empty("objective text"));
        }
        match self.oracle_label {
            Some(l) if l > 1 => Err(InvariantError::OracleLabel(l)),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct State {
    pub index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screenshot: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_observation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url_or_app: Option<String>,
    /// Pre-rendered set-of-mark / marker description.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<String>,
}

impl State {
    pub fn with_screenshot(index: u32, shot: ImageRef) -> Self {
        Self { index, screenshot: Some(shot), text_observation: None, url_or_app: None, annotations: None }
    }

    pub fn with_text(index: u32, text: impl Into<String>) -> Self {
        Self {
            index,
            screenshot: None,
            text_observation: Some(text.into()),
            url_or_app: None,
            annotations: None,
        }
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.screenshot.is_none() && self.text_observation.is_none() {
            return Err(InvariantError::EmptyState(self.index));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub raw_generation: String,
    pub parsed_action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl ActionRecord {
    pub fn parsed(action: impl Into<String>) -> Self {
        let action = action.into();
        Self { raw_generation: action.clone(), parsed_action: action, rationale: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub state: State,
    pub action: ActionRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub steps: Vec<Step>,
    pub terminal: bool,
}

impl Trajectory {
    pub fn new(task_id: impl Into<String>) -> Self {
        Self { task_id: task_id.into(), steps: Vec::new(), terminal: false }
    }

    pub fn push(&mut self, state: State, action: ActionRecord) {
        self.steps.push(Step { state, action });
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Structural invariants: non-empty, strictly increasing indices,
    /// non-empty states and actions.
    pub fn validate_shape(&self) -> Result<(), InvariantError> {
        if self.task_id.trim().is_empty() {
            return Err(InvariantError::Empty("trajectory task id"));
        }
        if self.steps.is_empty() {
            return Err(InvariantError::EmptyTrajectory);
        }
        let mut prev: Option<u32> = None;
        for step in &self.steps {
            if let Some(p) = prev {
                if step.state.index <= p {
                    return Err(InvariantError::NonIncreasingIndex { prev: p, next: step.state.index });
                }
            }
            prev = Some(step.state.index);
            step.state.validate()?;
            if step.action.parsed_action.trim().is_empty() {
                return Err(InvariantError::EmptyAction(step.state.index));
            }
        }
        Ok(())
    }

    /// Shape invariants plus the per-domain step limit.
    pub fn validate(&self, domain: Domain) -> Result<(), InvariantError> {
        self.validate_shape()?;
        if self.steps.len() > domain.max_steps() {
            return Err(InvariantError::TooManySteps {
                domain,
                len: self.steps.len(),
                max: domain.max_steps(),
            });
        }
        Ok(())
    }
}

/// Three-way verifier label. The derived order is the conservative
/// tie-break order used by voting: `Failure < PartialSuccess < Success`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VerdictLabel {
    Failure,
    PartialSuccess,
    Success,
}

impl VerdictLabel {
    pub const ALL: [VerdictLabel; 3] =
        [VerdictLabel::Failure, VerdictLabel::PartialSuccess, VerdictLabel::Success];

    /// Label text as it appears in the evaluation criteria.
    pub fn as_prompt_str(self) -> &'static str {
        match self {
            VerdictLabel::Success => "SUCCESS",
            VerdictLabel::PartialSuccess => "PARTIAL SUCCESS",
            VerdictLabel::Failure => "FAILURE",
        }
    }
}

impl fmt::Display for VerdictLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_prompt_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteHistogram {
    pub success: u32,
    pub partial_success: u32,
    pub failure: u32,
    /// Samples that did not parse; excluded from the vote.
    #[serde(default)]
    pub unparseable: u32,
}

impl VoteHistogram {
    pub fn count(&self, label: VerdictLabel) -> u32 {
        match label {
            VerdictLabel::Success => self.success,
            VerdictLabel::PartialSuccess => self.partial_success,
            VerdictLabel::Failure => self.failure,
        }
    }

    pub fn add(&mut self, label: VerdictLabel) {
        match label {
            VerdictLabel::Success => self.success += 1,
            VerdictLabel::PartialSuccess => self.partial_success += 1,
            VerdictLabel::Failure => self.failure += 1,
        }
    }

    pub fn valid_total(&self) -> u32 {
        self.success + self.partial_success + self.failure
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub output: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt + self.output
    }
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt += rhs.prompt;
        self.output += rhs.output;
    }
}

impl std::ops::Add for TokenUsage {
    type Output = TokenUsage;

    fn add(mut self, rhs: Self) -> Self::Output {
        self += rhs;
        self
    }
}

/// Parsed verifier output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: VerdictLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    /// First-step generation, set only by the self-grounded variants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<String>,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<VoteHistogram>,
    #[serde(default)]
    pub usage: TokenUsage,
}

impl Verdict {
    pub fn new(label: VerdictLabel, raw: impl Into<String>) -> Self {
        Self {
            label,
            reasoning: None,
            feedback: None,
            priors: None,
            raw: raw.into(),
            votes: None,
            usage: TokenUsage::default(),
        }
    }
}

/// A verdict as persisted in a run store, keyed by task and variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub task_id: String,
    pub variant: String,
    pub verdict: Verdict,
}

impl VerdictRecord {
    pub fn id(&self) -> String {
        format!("{}:{}", self.task_id, self.variant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Offline,
    Online,
}

/// One verifier or episode result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub task_id: String,
    pub domain: Domain,
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<VerdictLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors_digest: Option<String>,
    pub usage: TokenUsage,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub kind: RunKind,
    pub config_digest: String,
    pub model: String,
    #[serde(default)]
    pub rows: Vec<RunRow>,
}

pub fn validate_score(score: u8) -> Result<(), InvariantError> {
    if score > 1 {
        return Err(InvariantError::Score(score));
    }
    Ok(())
}

/// Hex SHA-256 of arbitrary bytes.
pub fn digest_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Digest of a value's canonical JSON encoding.
pub fn canonical_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("record types always serialize");
    digest_hex(json)
}
