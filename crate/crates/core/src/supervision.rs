//! Online supervision sessions: stop-triggered feedback and periodic replan.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActionRecord, Domain, InvariantError, State, Task, TokenUsage, Trajectory, Verdict, VerdictLabel};
use crate::store::{Store, StoreError};
use crate::verifier::{Verifier, VerifyError};

/// Default checkpoint interval for periodic supervision.
pub const DEFAULT_PERIOD: u32 = 20;
pub const DEFAULT_MAX_FEEDBACK_ROUNDS: u32 = 3;
/// Aux file receiving one stats row per closed session.
pub const EPISODES_FILE: &str = "episodes.jsonl";

/// Used when a rejecting verdict carries no feedback field.
pub const FALLBACK_FEEDBACK: &str = "The task is not complete yet. Review the objective and your previous actions.";

/// Verification as seen by the service.
pub trait StepVerifier: Send + Sync {
    fn verify(&self, task: &Task, trajectory: &Trajectory) -> Result<Verdict, VerifyError>;
    fn config_digest(&self) -> String;
}

impl StepVerifier for Verifier {
    fn verify(&self, task: &Task, trajectory: &Trajectory) -> Result<Verdict, VerifyError> {
        Verifier::verify(self, task, trajectory)
    }

    fn config_digest(&self) -> String {
        self.config().digest()
    }
}

/// Closure-backed verifier.
pub struct FnVerifier<F> {
    f: F,
    digest: String,
}

impl<F> FnVerifier<F>
where
    F: Fn(&Task, &Trajectory) -> Result<Verdict, VerifyError> + Send + Sync,
{
    pub fn new(digest: impl Into<String>, f: F) -> Self {
        Self { f, digest: digest.into() }
    }
}

impl<F> StepVerifier for FnVerifier<F>
where
    F: Fn(&Task, &Trajectory) -> Result<Verdict, VerifyError> + Send + Sync,
{
    fn verify(&self, task: &Task, trajectory: &Trajectory) -> Result<Verdict, VerifyError> {
        (self.f)(task, trajectory)
    }

    fn config_digest(&self) -> String {
        self.digest.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Mode {
    StopTriggered,
    Periodic { k: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    Accepted,
    BudgetExhausted,
    FeedbackExhausted,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Directive {
    Continue,
    Feedback { text: String, verdict: VerdictLabel },
    Replan { verdict: VerdictLabel },
    Halt { reason: HaltReason },
}

impl Directive {
    pub fn is_halt(&self) -> bool {
        matches!(self, Directive::Halt { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Open,
    Accepted,
    Exhausted,
    Aborted,
}

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("invalid budgets: {0}")]
    InvalidBudgets(String),
    #[error("invalid task: {0}")]
    InvalidTask(#[from] InvariantError),
    #[error("session `{0}` is closed to new steps (status {1:?})")]
    Terminal(String, SessionStatus),
    #[error("sequence number {got} is out of order (last was {last})")]
    OutOfOrder { got: u64, last: u64 },
    #[error("verifier config digest {got} does not match the service ({expected})")]
    ConfigMismatch { expected: String, got: String },
    #[error("store: {0}")]
    Store(#[from] StoreError),
    /// Error reported by a remote service or its transport.
    #[error("remote service ({status}): {message}")]
    Remote { status: u16, message: String },
}

impl SupervisionError {
    /// Whether the caller sent a bad request (as opposed to a service fault).
    pub fn is_client_error(&self) -> bool {
        match self {
            SupervisionError::Store(_) => false,
            SupervisionError::Remote { status, .. } => (400..500).contains(status),
            _ => true,
        }
    }
}

/// Open request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub task: Task,
    pub mode: Mode,
    /// Defaults to the domain step limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_budget: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_feedback_rounds: Option<u32>,
    /// `false` runs the bare agent protocol: stop is always accepted.
    #[serde(default = "yes")]
    pub verify: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

fn yes() -> bool {
    true
}

impl SessionSpec {
    pub fn stop_triggered(task: Task) -> Self {
        Self { task, mode: Mode::StopTriggered, step_budget: None, max_feedback_rounds: None, verify: true, config_digest: None }
    }

    pub fn periodic(task: Task, k: u32) -> Self {
        Self { mode: Mode::Periodic { k }, ..Self::stop_triggered(task) }
    }

    pub fn with_budget(mut self, steps: u32) -> Self {
        self.step_budget = Some(steps);
        self
    }

    pub fn with_feedback_rounds(mut self, rounds: u32) -> Self {
        self.max_feedback_rounds = Some(rounds);
        self
    }

    pub fn without_verification(mut self) -> Self {
        self.verify = false;
        self
    }
}

/// One step submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSubmission {
    pub seq: u64,
    pub state: State,
    pub action: ActionRecord,
    /// Tokens the agent spent producing this action.
    #[serde(default)]
    pub agent_usage: TokenUsage,
}

/// Final oracle result for an episode, as sub-tasks completed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleResult {
    pub completed: u32,
    pub total: u32,
}

impl OracleResult {
    pub fn binary(success: bool) -> Self {
        Self { completed: u32::from(success), total: 1 }
    }

    pub fn outcome(&self) -> VerdictLabel {
        if self.total > 0 && self.completed >= self.total {
            VerdictLabel::Success
        } else if self.completed == 0 {
            VerdictLabel::Failure
        } else {
            VerdictLabel::PartialSuccess
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub session_id: String,
    pub task_id: String,
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halt_reason: Option<HaltReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<VerdictLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleResult>,
    pub verification_count: u32,
    pub feedback_count: u32,
    pub replan_count: u32,
    pub steps_used: u32,
    pub verifier_usage: TokenUsage,
    pub agent_usage: TokenUsage,
}

impl EpisodeStats {
    pub fn token_usage(&self) -> TokenUsage {
        self.verifier_usage + self.agent_usage
    }
}

/// `stop` or `stop [...]`, case-insensitive.
pub fn is_stop_action(action: &str) -> bool {
    let a = action.trim_start().as_bytes();
    a.len() >= 4 && a[..4].eq_ignore_ascii_case(b"stop") && a.get(4).is_none_or(|c| !c.is_ascii_alphanumeric() && *c != b'_')
}

#[derive(Debug)]
struct Session {
    id: String,
    task: Task,
    mode: Mode,
    step_budget: u32,
    max_feedback_rounds: u32,
    verify: bool,
    trajectory: Trajectory,
    status: SessionStatus,
    halt_reason: Option<HaltReason>,
    last_seq: Option<u64>,
    directives: BTreeMap<u64, Directive>,
    verification_count: u32,
    feedback_count: u32,
    replan_count: u32,
    verifier_usage: TokenUsage,
    agent_usage: TokenUsage,
    last_verdict: Option<Verdict>,
}

impl Session {
    fn halt(&mut self, reason: HaltReason) -> Directive {
        self.status = match reason {
            HaltReason::Accepted => SessionStatus::Accepted,
            HaltReason::BudgetExhausted | HaltReason::FeedbackExhausted => SessionStatus::Exhausted,
            HaltReason::Error => SessionStatus::Aborted,
        };
        self.halt_reason = Some(reason);
        Directive::Halt { reason }
    }

    fn stats(&self, oracle: Option<OracleResult>) -> EpisodeStats {
        EpisodeStats {
            session_id: self.id.clone(),
            task_id: self.task.id.clone(),
            status: self.status,
            halt_reason: self.halt_reason,
            outcome: oracle.map(|o| o.outcome()),
            oracle,
            verification_count: self.verification_count,
            feedback_count: self.feedback_count,
            replan_count: self.replan_count,
            steps_used: self.trajectory.len() as u32,
            verifier_usage: self.verifier_usage,
            agent_usage: self.agent_usage,
        }
    }

    fn run_verifier(&mut self, verifier: Option<&dyn StepVerifier>) -> Result<Verdict, ()> {
        let Some(v) = verifier else { return Err(()) };
        self.verification_count += 1;
        match v.verify(&self.task, &self.trajectory) {
            Ok(verdict) => {
                self.verifier_usage += verdict.usage;
                self.last_verdict = Some(verdict.clone());
                Ok(verdict)
            }
            Err(e) => {
                log::warn!("session {}: verification failed: {e}", self.id);
                Err(())
            }
        }
    }

    fn advance(&mut self, sub: StepSubmission, verifier: Option<&dyn StepVerifier>) -> Result<Directive, SupervisionError> {
        if self.trajectory.len() as u32 >= self.step_budget {
            return Ok(self.halt(HaltReason::BudgetExhausted));
        }
        sub.state.validate()?;
        if sub.action.parsed_action.trim().is_empty() {
            return Err(InvariantError::EmptyAction(sub.state.index).into());
        }
        if let Some(prev) = self.trajectory.steps.last() {
            if sub.state.index <= prev.state.index {
                return Err(InvariantError::NonIncreasingIndex { prev: prev.state.index, next: sub.state.index }.into());
            }
        }
        self.agent_usage += sub.agent_usage;
        let stop = is_stop_action(&sub.action.parsed_action);
        self.trajectory.push(sub.state, sub.action);
        let verifier = if self.verify { verifier } else { None };
        match self.mode {
            Mode::StopTriggered => {
                if !stop {
                    return Ok(Directive::Continue);
                }
                if verifier.is_none() {
                    return Ok(self.halt(HaltReason::Accepted));
                }
                let Ok(verdict) = self.run_verifier(verifier) else { return Ok(self.halt(HaltReason::Error)) };
                if verdict.label == VerdictLabel::Success {
                    return Ok(self.halt(HaltReason::Accepted));
                }
                if self.feedback_count >= self.max_feedback_rounds {
                    return Ok(self.halt(HaltReason::FeedbackExhausted));
                }
                self.feedback_count += 1;
                let text = verdict.feedback.clone().unwrap_or_else(|| FALLBACK_FEEDBACK.to_string());
                Ok(Directive::Feedback { text, verdict: verdict.label })
            }
            Mode::Periodic { k } => {
                if verifier.is_none() || !(self.trajectory.len() as u32).is_multiple_of(k) {
                    return Ok(Directive::Continue);
                }
                let Ok(verdict) = self.run_verifier(verifier) else { return Ok(self.halt(HaltReason::Error)) };
                match verdict.label {
                    VerdictLabel::Success => Ok(self.halt(HaltReason::Accepted)),
                    VerdictLabel::PartialSuccess => Ok(Directive::Continue),
                    VerdictLabel::Failure => {
                        self.replan_count += 1;
                        Ok(Directive::Replan { verdict: verdict.label })
                    }
                }
            }
        }
    }
}

/// Snapshot of a session for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub status: SessionStatus,
    pub steps: u32,
    pub step_budget: u32,
    pub feedback_rounds_used: u32,
    pub max_feedback_rounds: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_verdict: Option<Verdict>,
}

/// Many concurrent sessions; submissions to one session are serialized by
/// its own lock, so verifications for different sessions run in parallel.
pub struct SupervisionService {
    verifier: Option<Arc<dyn StepVerifier>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    closed: Mutex<HashMap<String, EpisodeStats>>,
    next_id: AtomicU64,
    store: Option<Arc<Store>>,
}

impl SupervisionService {
    /// `None` disables verification for every session.
    pub fn new(verifier: Option<Arc<dyn StepVerifier>>) -> Self {
        Self {
            verifier,
            sessions: Mutex::new(HashMap::new()),
            closed: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            store: None,
        }
    }

    /// Closed-session stats are appended to the store's episode log.
    pub fn with_store(mut self, store: Arc<Store>) -> Self {
        self.store = Some(store);
        self
    }

    pub fn config_digest(&self) -> Option<String> {
        self.verifier.as_ref().map(|v| v.config_digest())
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, SupervisionError> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| SupervisionError::UnknownSession(id.to_string()))
    }

    fn check_digest(&self, got: Option<&str>) -> Result<(), SupervisionError> {
        if let Some(got) = got {
            let expected = self.config_digest().unwrap_or_default();
            if got != expected {
                return Err(SupervisionError::ConfigMismatch { expected, got: got.to_string() });
            }
        }
        Ok(())
    }

    pub fn open_session(&self, spec: SessionSpec) -> Result<String, SupervisionError> {
        spec.task.validate()?;
        self.check_digest(spec.config_digest.as_deref())?;
        let default_budget = spec.task.domain.max_steps() as u32;
        let step_budget = spec.step_budget.unwrap_or(default_budget);
        if step_budget == 0 {
            return Err(SupervisionError::InvalidBudgets("step budget must be positive".into()));
        }
        let max_feedback_rounds = spec.max_feedback_rounds.unwrap_or(DEFAULT_MAX_FEEDBACK_ROUNDS);
        if max_feedback_rounds == 0 {
            return Err(SupervisionError::InvalidBudgets("feedback rounds must be positive".into()));
        }
        if let Mode::Periodic { k: 0 } = spec.mode {
            return Err(SupervisionError::InvalidBudgets("period must be positive".into()));
        }
        let id = format!("s{:06}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let session = Session {
            id: id.clone(),
            trajectory: Trajectory::new(spec.task.id.clone()),
            task: spec.task,
            mode: spec.mode,
            step_budget,
            max_feedback_rounds,
            verify: spec.verify,
            status: SessionStatus::Open,
            halt_reason: None,
            last_seq: None,
            directives: BTreeMap::new(),
            verification_count: 0,
            feedback_count: 0,
            replan_count: 0,
            verifier_usage: TokenUsage::default(),
            agent_usage: TokenUsage::default(),
            last_verdict: None,
        };
        self.sessions.lock().expect("session map poisoned").insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }

    /// Resubmitting an already-seen sequence number returns the directive
    /// issued the first time without re-verifying.
    pub fn submit_step(&self, session_id: &str, sub: StepSubmission) -> Result<Directive, SupervisionError> {
        if let Some(stats) = self.closed.lock().expect("closed map poisoned").get(session_id) {
            return Err(SupervisionError::Terminal(session_id.to_string(), stats.status));
        }
        let handle = self.session(session_id)?;
        let mut s = handle.lock().expect("session poisoned");
        if let Some(d) = s.directives.get(&sub.seq) {
            return Ok(d.clone());
        }
        if s.status != SessionStatus::Open {
            return Err(SupervisionError::Terminal(s.id.clone(), s.status));
        }
        if let Some(last) = s.last_seq {
            if sub.seq <= last {
                return Err(SupervisionError::OutOfOrder { got: sub.seq, last });
            }
        }
        let seq = sub.seq;
        let directive = s.advance(sub, self.verifier.as_deref())?;
        s.last_seq = Some(seq);
        s.directives.insert(seq, directive.clone());
        Ok(directive)
    }

    pub fn view(&self, session_id: &str) -> Result<SessionView, SupervisionError> {
        let handle = self.session(session_id)?;
        let s = handle.lock().expect("session poisoned");
        Ok(SessionView {
            session_id: s.id.clone(),
            status: s.status,
            steps: s.trajectory.len() as u32,
            step_budget: s.step_budget,
            feedback_rounds_used: s.feedback_count,
            max_feedback_rounds: s.max_feedback_rounds,
            last_verdict: s.last_verdict.clone(),
        })
    }

    pub fn trajectory(&self, session_id: &str) -> Result<Trajectory, SupervisionError> {
        let handle = self.session(session_id)?;
        let s = handle.lock().expect("session poisoned");
        Ok(s.trajectory.clone())
    }

    /// Closing an open session aborts it. Closing twice returns the same
    /// stats.
    pub fn close_session(&self, session_id: &str, oracle: Option<OracleResult>) -> Result<EpisodeStats, SupervisionError> {
        if let Some(stats) = self.closed.lock().expect("closed map poisoned").get(session_id) {
            return Ok(stats.clone());
        }
        let handle = self
            .sessions
            .lock()
            .expect("session map poisoned")
            .remove(session_id)
            .ok_or_else(|| SupervisionError::UnknownSession(session_id.to_string()))?;
        let mut s = handle.lock().expect("session poisoned");
        if s.status == SessionStatus::Open {
            s.status = SessionStatus::Aborted;
        }
        let stats = s.stats(oracle);
        if let Some(store) = &self.store {
            store.append_aux(EPISODES_FILE, &stats)?;
        }
        self.closed.lock().expect("closed map poisoned").insert(session_id.to_string(), stats.clone());
        Ok(stats)
    }

    pub fn open_sessions(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.lock().expect("session map poisoned").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Closes every remaining session; open ones end as aborted.
    pub fn drain(&self) -> Result<Vec<EpisodeStats>, SupervisionError> {
        self.open_sessions().iter().map(|id| self.close_session(id, None)).collect()
    }
}

/// Session lifecycle as seen by an agent, in process or over the wire.
pub trait SessionClient {
    fn open(&self, spec: SessionSpec) -> Result<String, SupervisionError>;
    fn step(&self, session_id: &str, sub: StepSubmission) -> Result<Directive, SupervisionError>;
    fn close(&self, session_id: &str, oracle: Option<OracleResult>) -> Result<EpisodeStats, SupervisionError>;
}

impl SessionClient for SupervisionService {
    fn open(&self, spec: SessionSpec) -> Result<String, SupervisionError> {
        self.open_session(spec)
    }

    fn step(&self, session_id: &str, sub: StepSubmission) -> Result<Directive, SupervisionError> {
        self.submit_step(session_id, sub)
    }

    fn close(&self, session_id: &str, oracle: Option<OracleResult>) -> Result<EpisodeStats, SupervisionError> {
        self.close_session(session_id, oracle)
    }
}

/// Default step budget for a domain.
pub fn default_budget(domain: Domain) -> u32 {
    domain.max_steps() as u32
}
