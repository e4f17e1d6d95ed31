use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::catalog::SimCatalog;
use super::env::SimEnv;
use super::policy::{PolicyKind, ScriptedPolicy};
use super::task::{mock_verifier, oracles, MockKind, OracleVerdicts, SimTaskSpec};
use super::SimError;
use crate::exec::Execution;
use crate::gateway::text_tokens;
use crate::model::{Domain, RunKind, RunManifest, RunRow, Task, TokenUsage, Trajectory};
use crate::store::{Record, RecordKind, Store, StoreError};
use crate::supervision::{
    Directive, EpisodeStats, FnVerifier, HaltReason, EPISODES_FILE, OracleResult, SessionClient, SessionSpec, StepSubmission, StepVerifier, SupervisionService,
};
use crate::verifier::VerifyError;

/// Tokens a ReAct-style agent spends on one step: the objective and every
/// observation so far as prompt, its generation as output.
pub fn agent_usage(objective: &str, observations: &[String], generation: &str) -> TokenUsage {
    TokenUsage {
        prompt: text_tokens(objective) + observations.iter().map(|o| text_tokens(o)).sum::<u64>(),
        output: text_tokens(generation),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub task_id: String,
    pub spec: SimTaskSpec,
    pub policy: PolicyKind,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn task(&self) -> Task {
        self.spec.task(self.task_id.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub trajectory: Trajectory,
    pub oracles: OracleVerdicts,
    pub stats: EpisodeStats,
    pub feedback: Vec<String>,
}

/// Runs one episode through `service`. A service without a verifier plays
/// the bare agent protocol.
pub fn run_episode(
    catalog: Arc<SimCatalog>,
    ep: &EpisodeSpec,
    service: &impl SessionClient,
    session: impl FnOnce(Task) -> SessionSpec,
) -> Result<Episode, SimError> {
    let task = ep.task();
    let mut policy = ScriptedPolicy::new(ep.policy, &ep.spec, &catalog, ep.seed)?;
    let sid = service.open(session(task.clone()))?;
    let mut env = SimEnv::new(catalog.clone());
    let mut trajectory = Trajectory::new(task.id.clone());
    let mut observations = Vec::new();
    let mut pending: Option<String> = None;
    let mut feedback = Vec::new();
    for index in 0u32.. {
        let state = env.state(index);
        observations.push(state.text_observation.clone().unwrap_or_default());
        let action = policy.next(pending.take().as_deref());
        let usage = agent_usage(&task.objective_text, &observations, &action.raw_generation);
        let directive = service.step(
            &sid,
            StepSubmission { seq: u64::from(index), state: state.clone(), action: action.clone(), agent_usage: usage },
        )?;
        // the service rejects the step itself when the budget is spent
        if directive == (Directive::Halt { reason: HaltReason::BudgetExhausted }) {
            break;
        }
        trajectory.push(state, action.clone());
        env.step(&action.parsed_action);
        match directive {
            Directive::Continue => {}
            Directive::Feedback { text, .. } => {
                feedback.push(text.clone());
                pending = Some(text);
            }
            Directive::Replan { .. } => policy.replan(),
            Directive::Halt { .. } => break,
        }
    }
    trajectory.terminal = true;
    let oracles = oracles(&ep.spec, &env)?;
    let stats = service.close(&sid, Some(OracleResult::binary(oracles.strict)))?;
    Ok(Episode { spec: ep.clone(), trajectory, oracles, stats, feedback })
}

/// Who supervises a batch.
#[derive(Clone)]
pub enum Supervisor {
    None,
    Mock(MockKind),
    Verifier(Arc<dyn StepVerifier>),
}

impl std::fmt::Debug for Supervisor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Supervisor::None => f.write_str("None"),
            Supervisor::Mock(k) => write!(f, "Mock({k:?})"),
            Supervisor::Verifier(v) => write!(f, "Verifier({})", v.config_digest()),
        }
    }
}

impl Supervisor {
    /// Mock verifiers resolve the task spec from the objective text.
    pub fn service(&self, catalog: Arc<SimCatalog>, specs: &[EpisodeSpec]) -> SupervisionService {
        match self {
            Supervisor::None => SupervisionService::new(None),
            Supervisor::Verifier(v) => SupervisionService::new(Some(v.clone())),
            Supervisor::Mock(kind) => {
                let kind = *kind;
                let by_task: std::collections::HashMap<String, SimTaskSpec> =
                    specs.iter().map(|e| (e.task_id.clone(), e.spec.clone())).collect();
                let v = FnVerifier::new(format!("sim-mock-{kind:?}"), move |task: &Task, traj: &Trajectory| {
                    let spec = by_task
                        .get(&task.id)
                        .ok_or_else(|| VerifyError::Config(format!("no sim spec for task {}", task.id)))?;
                    mock_verifier(kind, traj, spec, catalog.clone()).map_err(|e| VerifyError::Config(e.to_string()))
                });
                SupervisionService::new(Some(Arc::new(v)))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Policies assigned round-robin.
    pub policies: Vec<PolicyKind>,
    pub supervisor: Supervisor,
    pub step_budget: Option<u32>,
    pub max_feedback_rounds: Option<u32>,
}

impl BatchConfig {
    pub fn new(episodes: usize, seed: u64, policies: Vec<PolicyKind>, supervisor: Supervisor) -> Self {
        Self { episodes, seed, policies, supervisor, step_budget: None, max_feedback_rounds: None }
    }

    /// Session request for one of this batch's tasks.
    pub fn session(&self, task: Task) -> SessionSpec {
        let mut s = SessionSpec::stop_triggered(task);
        s.step_budget = self.step_budget;
        s.max_feedback_rounds = self.max_feedback_rounds;
        s
    }

    pub fn specs(&self, catalog: &SimCatalog) -> Vec<EpisodeSpec> {
        (0..self.episodes)
            .map(|i| {
                let seed = self.seed.wrapping_add(i as u64);
                EpisodeSpec {
                    task_id: format!("sim-{:04}", i),
                    spec: SimTaskSpec::sample_seeded(catalog, seed),
                    policy: self.policies[i % self.policies.len().max(1)],
                    seed,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchResult {
    pub episodes: Vec<Episode>,
}

impl BatchResult {
    /// Strict-oracle success rate, in percent, over episodes passing `filter`.
    pub fn success_rate(&self, filter: impl Fn(&Episode) -> bool) -> Option<f64> {
        let eps: Vec<&Episode> = self.episodes.iter().filter(|e| filter(e)).collect();
        if eps.is_empty() {
            return None;
        }
        Some(100.0 * eps.iter().filter(|e| e.oracles.strict).count() as f64 / eps.len() as f64)
    }

    pub fn total_usage(&self) -> TokenUsage {
        self.episodes.iter().fold(TokenUsage::default(), |acc, e| acc + e.stats.token_usage())
    }

    /// Online manifest: one row per episode with the strict oracle result
    /// and the agent plus verifier tokens.
    pub fn manifest(&self, run_id: &str, method: &str, config_digest: &str) -> RunManifest {
        let rows = self
            .episodes
            .iter()
            .map(|e| RunRow {
                task_id: e.spec.task_id.clone(),
                domain: Domain::Sim,
                variant: method.to_string(),
                label: e.stats.outcome,
                reward: None,
                oracle: Some(e.oracles.strict as u8),
                priors_digest: None,
                usage: e.stats.token_usage(),
                latency_ms: 0,
                error_class: None,
            })
            .collect();
        RunManifest {
            run_id: run_id.to_string(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            kind: RunKind::Online,
            config_digest: config_digest.to_string(),
            model: "sim".into(),
            rows,
        }
    }

    /// Writes tasks (oracle label = strict oracle), trajectories and
    /// episode stats. Tasks already in the store are left alone.
    pub fn write_to(&self, store: &Store) -> Result<(), StoreError> {
        for e in &self.episodes {
            if !store.contains(RecordKind::Task, &e.spec.task_id) {
                store.write(Record::Task(e.spec.task().with_oracle(e.oracles.strict as u8)))?;
                store.write(Record::Trajectory(e.trajectory.clone()))?;
            }
            store.append_aux(EPISODES_FILE, &e.stats)?;
        }
        Ok(())
    }
}

/// Episodes are independent and run through one shared service; results
/// come back in episode order whatever the execution mode.
pub fn run_batch(catalog: Arc<SimCatalog>, config: &BatchConfig, exec: Execution) -> Result<BatchResult, SimError> {
    if config.policies.is_empty() {
        return Err(SimError::Unsatisfiable("no policies given".into()));
    }
    let specs = config.specs(&catalog);
    let service = config.supervisor.service(catalog.clone(), &specs);
    let episodes = exec.map(&specs, |ep| {
        run_episode(catalog.clone(), ep, &service, |task| config.session(task))
    });
    let mut episodes: Vec<Episode> = episodes.into_iter().collect::<Result<_, _>>()?;
    // session ids depend on scheduling; renumber by episode order
    for (i, e) in episodes.iter_mut().enumerate() {
        e.stats.session_id = format!("s{:06}", i + 1);
    }
    Ok(BatchResult { episodes })
}
