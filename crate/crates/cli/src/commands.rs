use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;
use trajverify::exec::Execution;
use trajverify::metrics::render_manifests;
use trajverify::model::{canonical_digest, RunManifest};
use trajverify::run::{self, build_verifier, RunConfig, REPORT_FILE, TRANSCRIPT_FILE};
use trajverify::sim::{self, BatchConfig, MockKind, PolicyKind, SimCatalog, Supervisor};
use trajverify::store::{Record, RecordKind, Store};
use trajverify::subset::{select_subset, SubsetConfig, TaskScoreRecord};
use trajverify::supervision::{SessionStatus, StepVerifier, SupervisionService};

use crate::config::Layer;
use crate::{Cli, Command};

pub const SUBSET_FILE: &str = "subset.json";
pub const SIMULATION_FILE: &str = "simulation.json";

pub fn run(cli: Cli) -> Result<u8> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    let file = cli.config.as_deref();
    match cli.command {
        Command::Evaluate { input, output, lenient, run_id, settings } => {
            evaluate(Layer::resolve(settings, file)?, input, output, lenient, run_id, exec)
        }
        Command::Supervise { addr, store, no_verify, settings } => {
            supervise(Layer::resolve(settings, file)?, &addr, &store, no_verify)
        }
        Command::Subset { records, fraction, seed, sizes, max_iters, output } => {
            subset(&records, fraction, seed, sizes, max_iters, &output, exec)
        }
        Command::Simulate { episodes, policies, supervisor, budget, feedback_rounds, output, settings } => {
            let sim = SimArgs { episodes, policies, supervisor, budget, feedback_rounds };
            simulate(Layer::resolve(settings, file)?, sim, &output, exec)
        }
        Command::Report { runs, baseline } => report(&runs, baseline.as_deref()),
    }
}

fn print(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn run_config(settings: &Layer, input: PathBuf, output: PathBuf) -> Result<RunConfig> {
    let mut cfg = RunConfig::new(settings.verifier()?, settings.backend()?, input, output);
    cfg.parallelism = settings.parallelism;
    cfg.seed = settings.seed.unwrap_or(0);
    Ok(cfg)
}

fn evaluate(settings: Layer, input: PathBuf, output: PathBuf, lenient: bool, run_id: Option<String>, exec: Execution) -> Result<u8> {
    if !input.is_dir() {
        bail!("input store {} does not exist", input.display());
    }
    let mut cfg = run_config(&settings, input, output)?;
    cfg.lenient = lenient;
    cfg.run_id = run_id;
    let input = Store::open(&cfg.input)?;
    let output = Store::open(&cfg.output)?;
    let verifier = build_verifier(&cfg, input.images(), Some(&cfg.output.join(TRANSCRIPT_FILE)))?;
    let outcome = run::evaluate(&cfg, &verifier, &input, &output, exec)?;
    print(&outcome.report)?;
    eprintln!(
        "{} evaluated, {} already done, {} unparseable, {} failed, {} gateway calls",
        outcome.evaluated, outcome.skipped, outcome.unparseable, outcome.failed, outcome.gateway_calls
    );
    Ok(outcome.exit_code(lenient) as u8)
}

fn supervise(settings: Layer, addr: &str, store_dir: &Path, no_verify: bool) -> Result<u8> {
    let store = Arc::new(Store::open(store_dir)?);
    let verifier: Option<Arc<dyn StepVerifier>> = if no_verify {
        None
    } else {
        let cfg = run_config(&settings, store_dir.to_path_buf(), store_dir.to_path_buf())?;
        run::pin_run(store_dir, &cfg)?;
        Some(Arc::new(build_verifier(&cfg, store.images(), Some(&store_dir.join(TRANSCRIPT_FILE)))?))
    };
    let service = Arc::new(SupervisionService::new(verifier).with_store(store.clone()));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let drained = rt.block_on(async {
        let listener = trajverify_server::bind(addr).await?;
        print(&format!("listening on http://{}\n", listener.local_addr()?))?;
        let drained =
            trajverify_server::serve(listener, service.clone(), Some(store), trajverify_server::shutdown_signal()).await?;
        Ok::<_, anyhow::Error>(drained)
    })?;
    drop(rt);
    let aborted = drained.iter().filter(|s| s.status == SessionStatus::Aborted).count();
    eprintln!("shut down; {} unclosed session(s) flushed, {aborted} aborted", drained.len());
    Ok(0)
}

fn read_records(path: &Path) -> Result<Vec<TaskScoreRecord>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn subset(
    records: &Path,
    fraction: f64,
    seed: u64,
    sizes: Vec<(String, usize)>,
    max_iters: Option<usize>,
    output: &Path,
    exec: Execution,
) -> Result<u8> {
    let records = read_records(records)?;
    let mut cfg = SubsetConfig::new(fraction, seed).with_sizes(sizes);
    if let Some(n) = max_iters {
        cfg.max_iters = n;
    }
    let result = select_subset(&records, &cfg, exec)?;
    std::fs::create_dir_all(output)?;
    let manifest = json!({ "config": cfg, "result": result });
    std::fs::write(output.join(SUBSET_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let report = result.report.render();
    std::fs::write(output.join(REPORT_FILE), &report)?;
    print(&report)?;
    eprintln!("{} tasks selected in {} swap(s)", result.selected.len(), result.iterations);
    Ok(0)
}

struct SimArgs {
    episodes: usize,
    policies: Vec<String>,
    supervisor: String,
    budget: Option<u32>,
    feedback_rounds: Option<u32>,
}

fn simulate(settings: Layer, args: SimArgs, output: &Path, exec: Execution) -> Result<u8> {
    let policies: Vec<PolicyKind> = if args.policies.is_empty() {
        PolicyKind::ALL.to_vec()
    } else {
        args.policies.iter().map(|p| p.parse().map_err(|e: String| anyhow!(e))).collect::<Result<_>>()?
    };
    let catalog_seed = settings.catalog_seed.unwrap_or(0);
    let catalog = Arc::new(SimCatalog::generate(catalog_seed, sim::DEFAULT_ITEMS, sim::DEFAULT_CATEGORIES));
    let store = Store::open(output)?;
    let (supervisor, method, verifier_identity) = match args.supervisor.as_str() {
        "none" => (Supervisor::None, "react".to_string(), json!(null)),
        "verifier" => {
            let cfg = run_config(&settings, output.to_path_buf(), output.to_path_buf())?;
            let v = build_verifier(&cfg, store.images(), Some(&output.join(TRANSCRIPT_FILE)))?;
            let identity = json!({ "verifier": cfg.verifier, "backend": cfg.backend });
            (Supervisor::Verifier(Arc::new(v)), format!("react+{}", cfg.verifier.label()), identity)
        }
        other => {
            let kind: MockKind = other.parse().map_err(|e: String| anyhow!(e))?;
            (Supervisor::Mock(kind), format!("react+{}", other.to_ascii_lowercase()), json!(null))
        }
    };
    let mut batch = BatchConfig::new(args.episodes, settings.seed.unwrap_or(0), policies.clone(), supervisor);
    batch.step_budget = args.budget;
    batch.max_feedback_rounds = args.feedback_rounds;
    let identity = json!({
        "episodes": args.episodes,
        "seed": batch.seed,
        "policies": policies.iter().map(|p| p.as_str()).collect::<Vec<_>>(),
        "supervisor": args.supervisor,
        "budget": args.budget,
        "feedback_rounds": args.feedback_rounds,
        "catalog_seed": catalog_seed,
        "verifier": verifier_identity,
    });
    let digest = canonical_digest(&identity);
    let run_id = format!("{method}-{}", &digest[..12]);
    if store.contains(RecordKind::Manifest, &run_id) {
        bail!("run {run_id} already exists in {}", output.display());
    }
    let result = sim::run_batch(catalog, &batch, exec)?;
    result.write_to(&store)?;
    let manifest = result.manifest(&run_id, &method, &digest);
    store.write(Record::Manifest(manifest.clone()))?;
    std::fs::write(output.join(SIMULATION_FILE), serde_json::to_string_pretty(&identity)? + "\n")?;
    let report = render_manifests(std::slice::from_ref(&manifest), None)?;
    std::fs::write(output.join(REPORT_FILE), &report)?;
    print(&report)?;
    Ok(0)
}

fn manifests_in(dir: &Path) -> Result<Vec<RunManifest>> {
    if !dir.is_dir() {
        bail!("run directory {} does not exist", dir.display());
    }
    let mut found = Store::open(dir)?.manifests();
    if found.is_empty() {
        bail!("no run manifests in {}", dir.display());
    }
    found.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(found)
}

fn report(runs: &[PathBuf], baseline: Option<&str>) -> Result<u8> {
    let mut manifests = Vec::new();
    let mut baseline_id = baseline.map(str::to_string);
    for dir in runs {
        let found = manifests_in(dir)?;
        if baseline.is_some_and(|b| Path::new(b) == dir.as_path()) {
            baseline_id = Some(found[0].run_id.clone());
        }
        manifests.extend(found);
    }
    let text = render_manifests(&manifests, baseline_id.as_deref())?;
    print(&text)?;
    Ok(0)
}
