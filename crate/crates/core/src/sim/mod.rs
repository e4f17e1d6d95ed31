//! Miniature shopping environment with scripted policies, oracles and mock
//! verifiers.

mod backend;
mod catalog;
mod env;
mod episode;
mod policy;
mod task;

use thiserror::Error;

pub use backend::{SimBackend, SimBackendMode, PRIORS_TEXT};
pub use catalog::{Item, SimCatalog, DEFAULT_CATEGORIES, DEFAULT_ITEMS};
pub use env::{Event, Page, SimAction, SimEnv};
pub use episode::{
    agent_usage, run_batch, run_episode, BatchConfig, BatchResult, Episode, EpisodeSpec, Supervisor,
};
pub use policy::{PolicyKind, ScriptedPolicy};
pub use task::{
    mock_completion, mock_verifier, oracles, permissive, replay, replay_trajectory, strict, Missing, MockKind,
    OracleVerdicts, SimTaskSpec, Target,
};

use crate::supervision::SupervisionError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no catalog item satisfies `{0}`")]
    Unsatisfiable(String),
    #[error("unknown sim objective `{0}`")]
    UnknownObjective(String),
    #[error("supervision: {0}")]
    Supervision(#[from] SupervisionError),
}
