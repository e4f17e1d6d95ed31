//! Run configuration and resumable offline evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::exec::Execution;
use crate::gateway::{Gateway, GatewayError};
use crate::metrics::{render_manifests, MetricsError};
use crate::model::{canonical_digest, digest_hex, RunKind, RunManifest, RunRow, Task, Trajectory, VerdictRecord};
use crate::prompt::PromptAssembler;
use crate::sim::{MockKind, SimBackend, SimBackendMode, SimCatalog};
use crate::store::{ImageRoot, Record, RecordKind, Store, StoreError};
use crate::verifier::{map_reward, Verifier, VerifierConfig, VerifyError};

pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.txt";
pub const TRANSCRIPT_FILE: &str = "transcripts.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    /// Grounded only when first-step priors are in the request.
    PriorSensitive,
    Biased,
    Grounded,
}

impl MockMode {
    pub fn backend_mode(self) -> SimBackendMode {
        match self {
            MockMode::PriorSensitive => SimBackendMode::PriorSensitive,
            MockMode::Biased => SimBackendMode::Fixed(MockKind::Biased),
            MockMode::Grounded => SimBackendMode::Fixed(MockKind::Grounded),
        }
    }
}

impl std::str::FromStr for MockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "prior-sensitive" | "default" => Ok(MockMode::PriorSensitive),
            "biased" => Ok(MockMode::Biased),
            "grounded" => Ok(MockMode::Grounded),
            _ => Err(format!("unknown mock mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Deterministic sim-catalog model; no network.
    Mock {
        mode: MockMode,
        #[serde(default)]
        catalog_seed: u64,
    },
    #[cfg(feature = "http")]
    Http(crate::gateway::BackendConfig),
}

impl BackendSpec {
    pub fn mock(mode: MockMode) -> Self {
        BackendSpec::Mock { mode, catalog_seed: 0 }
    }

    pub fn model_id(&self) -> String {
        match self {
            BackendSpec::Mock { mode, .. } => match mode {
                MockMode::PriorSensitive => "mock:prior-sensitive".into(),
                MockMode::Biased => "mock:biased".into(),
                MockMode::Grounded => "mock:grounded".into(),
            },
            #[cfg(feature = "http")]
            BackendSpec::Http(c) => c.model.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("task `{0}` has no oracle label")]
    MissingOracle(String),
    #[error("task `{0}` has no trajectory")]
    MissingTrajectory(String),
    #[error("input store has no tasks")]
    NoTasks,
    #[error("run directory was created with config {found}, this config is {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("verifier: {0}")]
    Verify(#[from] VerifyError),
    #[error("backend: {0}")]
    Gateway(#[from] GatewayError),
    #[error("prompt templates: {0}")]
    Templates(String),
    #[error("report: {0}")]
    Metrics(#[from] MetricsError),
    #[error("io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad run file: {0}")]
    RunFile(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub verifier: VerifierConfig,
    pub backend: BackendSpec,
    pub input: PathBuf,
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lenient: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

impl RunConfig {
    pub fn new(verifier: VerifierConfig, backend: BackendSpec, input: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        Self {
            verifier,
            backend,
            input: input.into(),
            output: output.into(),
            parallelism: None,
            seed: 0,
            lenient: false,
            run_id: None,
        }
    }

    /// Digest over everything that changes results. Paths, parallelism and
    /// leniency are excluded.
    pub fn digest(&self) -> String {
        canonical_digest(&json!({ "verifier": self.verifier, "backend": self.backend, "seed": self.seed }))
    }

    pub fn resolved_run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| format!("{}-{}", self.verifier.label(), &self.digest()[..12]))
    }
}

/// Gateway for a backend spec. Transcripts go to `transcript` when given,
/// with the API key redacted.
#[cfg_attr(not(feature = "http"), allow(unused_variables))]
pub fn build_gateway(spec: &BackendSpec, images: ImageRoot, transcript: Option<&Path>) -> Result<Gateway, RunError> {
    let (gateway, secrets) = match spec {
        BackendSpec::Mock { mode, catalog_seed } => {
            let catalog = SimCatalog::generate(*catalog_seed, crate::sim::DEFAULT_ITEMS, crate::sim::DEFAULT_CATEGORIES);
            let backend = SimBackend::for_catalog(mode.backend_mode(), Arc::new(catalog));
            (Gateway::new(Arc::new(backend)), Vec::new())
        }
        #[cfg(feature = "http")]
        BackendSpec::Http(cfg) => {
            let backend = crate::gateway::HttpBackend::new(cfg.clone(), images)?;
            let secrets = backend.secrets();
            let gw = Gateway::new(Arc::new(backend)).with_retry(cfg.retry.clone()).with_max_in_flight(cfg.max_in_flight);
            (gw, secrets)
        }
    };
    match transcript {
        Some(path) => gateway.with_transcript_log(path, secrets).map_err(io(path)),
        None => Ok(gateway),
    }
}

pub fn build_verifier(config: &RunConfig, images: ImageRoot, transcript: Option<&Path>) -> Result<Verifier, RunError> {
    let gateway = Arc::new(build_gateway(&config.backend, images.clone(), transcript)?);
    let prompts = Arc::new(PromptAssembler::new(images).map_err(|e| RunError::Templates(e.to_string()))?);
    Ok(Verifier::new(gateway, prompts, config.verifier.clone())?)
}

/// What `run.json` pins for a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub run_id: String,
    pub config_digest: String,
    pub config: RunConfig,
}

/// Records `config` in `dir`, or checks it against the one already there.
pub fn pin_run(dir: &Path, config: &RunConfig) -> Result<RunFile, RunError> {
    let path = dir.join(RUN_FILE);
    let wanted = RunFile { run_id: config.resolved_run_id(), config_digest: config.digest(), config: config.clone() };
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(io(&path))?;
        let found: RunFile = serde_json::from_str(&text).map_err(|e| RunError::RunFile(e.to_string()))?;
        if found.config_digest != wanted.config_digest {
            return Err(RunError::ConfigMismatch { expected: wanted.config_digest, found: found.config_digest });
        }
        return Ok(found);
    }
    let text = serde_json::to_string_pretty(&wanted).expect("config serializes");
    std::fs::write(&path, text + "\n").map_err(io(&path))?;
    Ok(wanted)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub manifest: RunManifest,
    pub report: String,
    /// Tasks verified in this invocation; the rest were already done.
    pub evaluated: usize,
    pub skipped: usize,
    pub unparseable: usize,
    pub failed: usize,
    pub gateway_calls: u64,
}

impl EvalOutcome {
    /// 0 clean, 2 when failures were tolerated, 1 otherwise.
    pub fn exit_code(&self, lenient: bool) -> i32 {
        match (self.unparseable + self.failed, lenient) {
            (0, _) => 0,
            (_, true) => 2,
            (_, false) => 1,
        }
    }
}

fn evaluate_one(verifier: &Verifier, variant: &str, task: &Task, trajectory: &Trajectory) -> (RunRow, Option<VerdictRecord>) {
    let started = Instant::now();
    let result = verifier.verify(task, trajectory);
    let latency_ms = started.elapsed().as_millis() as u64;
    let mut row = RunRow {
        task_id: task.id.clone(),
        domain: task.domain,
        variant: variant.to_string(),
        label: None,
        reward: None,
        oracle: task.oracle_label,
        priors_digest: None,
        usage: Default::default(),
        latency_ms,
        error_class: None,
    };
    match result {
        Ok(v) => {
            row.label = Some(v.label);
            row.reward = Some(map_reward(&v));
            row.priors_digest = v.priors.as_deref().map(digest_hex);
            row.usage = v.usage;
            (row, Some(VerdictRecord { task_id: task.id.clone(), variant: variant.to_string(), verdict: v }))
        }
        Err(e) => {
            log::warn!("task {}: {e}", task.id);
            row.error_class = Some(e.class().to_string());
            (row, None)
        }
    }
}

/// Verifies every labelled trajectory in `input` and writes verdicts, rows,
/// a manifest and a report to `output`. Tasks that already have a verdict
/// in `output` are skipped, so an interrupted run can be resumed. Failed
/// tasks are retried on resume.
pub fn evaluate(config: &RunConfig, verifier: &Verifier, input: &Store, output: &Store, exec: Execution) -> Result<EvalOutcome, RunError> {
    let pinned = pin_run(output.root(), config)?;
    let variant = config.verifier.label();
    let tasks = input.tasks();
    if tasks.is_empty() {
        return Err(RunError::NoTasks);
    }
    let mut work = Vec::new();
    for task in tasks {
        if task.oracle_label.is_none() {
            return Err(RunError::MissingOracle(task.id));
        }
        let trajectory = input.read_trajectory(&task.id).map_err(|_| RunError::MissingTrajectory(task.id.clone()))?;
        work.push((task, trajectory));
    }
    let done: BTreeSet<String> = output
        .list(RecordKind::Verdict)
        .into_iter()
        .filter_map(|r| match r {
            Record::Verdict(v) if v.variant == variant => Some(v.task_id),
            _ => None,
        })
        .collect();
    let pending: Vec<&(Task, Trajectory)> = work.iter().filter(|(t, _)| !done.contains(&t.id)).collect();
    let calls_before = verifier.gateway().calls();
    let results = exec.with_threads(config.parallelism, || {
        exec.map(&pending, |(task, traj)| {
            let (row, record) = evaluate_one(verifier, &variant, task, traj);
            if let Some(rec) = record {
                output.write(Record::Verdict(rec))?;
            }
            output.append_row(&row)?;
            Ok::<RunRow, RunError>(row)
        })
    });
    let mut unparseable = 0;
    let mut failed = 0;
    for r in &results {
        match r {
            Ok(row) if row.error_class.as_deref() == Some("unparseable") => unparseable += 1,
            Ok(row) if row.error_class.is_some() => failed += 1,
            Ok(_) => {}
            Err(_) => failed += 1,
        }
    }
    if let Some(Err(e)) = results.into_iter().find(Result::is_err) {
        return Err(e);
    }

    // latest row per task, in task order
    let mut latest: BTreeMap<String, RunRow> = BTreeMap::new();
    for row in output.read_rows()? {
        if row.variant == variant {
            latest.insert(row.task_id.clone(), row);
        }
    }
    let manifest = RunManifest {
        run_id: pinned.run_id.clone(),
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        kind: RunKind::Offline,
        config_digest: pinned.config_digest.clone(),
        model: config.backend.model_id(),
        rows: latest.into_values().collect(),
    };
    let complete = manifest.rows.iter().all(|r| r.error_class.is_none());
    if (complete || config.lenient) && !output.contains(RecordKind::Manifest, &manifest.run_id) {
        output.write(Record::Manifest(manifest.clone()))?;
    }
    let report = render_manifests(std::slice::from_ref(&manifest), None)?;
    let report_path = output.root().join(REPORT_FILE);
    std::fs::write(&report_path, &report).map_err(io(&report_path))?;
    Ok(EvalOutcome {
        evaluated: pending.len(),
        skipped: work.len() - pending.len(),
        unparseable,
        failed,
        gateway_calls: verifier.gateway().calls() - calls_before,
        manifest,
        report,
    })
}
