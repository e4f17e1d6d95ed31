mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Layer;

#[derive(Debug, Parser)]
#[command(name = "trajverify", version, about = "Verify, supervise and evaluate agent trajectories")]
struct Cli {
    /// TOML file with backend and verifier settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Verify stored trajectories and score the verdicts against oracle labels.
    Evaluate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Tolerate unparseable or failed verdicts (exit 2 instead of 1).
        #[arg(long)]
        lenient: bool,
        #[arg(long)]
        run_id: Option<String>,
        #[command(flatten)]
        settings: Layer,
    },
    /// Serve the supervision API until SIGINT or SIGTERM.
    Supervise {
        #[arg(long, default_value = "127.0.0.1:8077")]
        addr: String,
        /// Directory for episode stats, screenshots and transcripts.
        #[arg(long)]
        store: PathBuf,
        /// Accept every stop without verifying.
        #[arg(long)]
        no_verify: bool,
        #[command(flatten)]
        settings: Layer,
    },
    /// Pick a representative subset of scored tasks.
    Subset {
        /// JSON lines of {task_id, domain, template_id, score}.
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exact size for one domain, as DOMAIN=N. Repeatable.
        #[arg(long = "size", value_parser = parse_size)]
        sizes: Vec<(String, usize)>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run scripted agents in the shopping simulator.
    Simulate {
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        /// greedy, thorough or backtracking. Repeatable; default all three.
        #[arg(long = "policy")]
        policies: Vec<String>,
        /// none, biased, grounded, or verifier (prompted, uses the backend settings).
        #[arg(long, default_value = "none")]
        supervisor: String,
        #[arg(long)]
        budget: Option<u32>,
        #[arg(long)]
        feedback_rounds: Option<u32>,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        settings: Layer,
    },
    /// Render tables from run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Run id (or run directory) that token counts are relative to.
        #[arg(long)]
        baseline: Option<String>,
    },
}

fn parse_size(s: &str) -> Result<(String, usize), String> {
    let (d, n) = s.split_once('=').ok_or_else(|| format!("expected DOMAIN=N, got `{s}`"))?;
    Ok((d.to_string(), n.parse().map_err(|e| format!("`{n}`: {e}"))?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
