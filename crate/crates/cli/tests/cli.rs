use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use trajverify::exec::Execution;
use trajverify::model::VerdictLabel;
use trajverify::sim::{run_episode, BatchConfig, PolicyKind, SimCatalog, Supervisor};
use trajverify::store::{Record, Store};
use trajverify::supervision::{EpisodeStats, SessionStatus, EPISODES_FILE};
use trajverify_server::HttpClient;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trajverify"));
    for (k, _) in std::env::vars() {
        if k.starts_with("TRAJVERIFY_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--episodes", "10", "--seed", "4", "--output", p(out)];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    o
}

#[test]
fn evaluate_grounded_mock_over_sim_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    simulate(&input, &[]);
    let out = tmp.path().join("out");
    let args = ["evaluate", "--input", p(&input), "--output", p(&out), "--mock", "grounded", "--method", "baseline"];
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = stdout(&o);
    let line = report.lines().find(|l| l.starts_with("cot")).unwrap();
    let cells: Vec<&str> = line.split('|').nth(1).unwrap().split_whitespace().collect();
    assert_eq!(cells[1], "100", "TNR cell in {report}");
    assert!(stderr(&o).contains("10 gateway calls"));
    assert_eq!(std::fs::read_to_string(out.join("report.txt")).unwrap(), report);

    // resume issues no calls and reproduces the report
    let again = run(&args);
    assert_eq!(again.status.code(), Some(0));
    assert!(stderr(&again).contains("0 evaluated, 10 already done"), "{}", stderr(&again));
    assert!(stderr(&again).contains(" 0 gateway calls"));
    assert_eq!(stdout(&again), report);
}

#[test]
fn identical_configs_give_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let a = simulate(&tmp.path().join("a"), &["--supervisor", "verifier", "--mock"]);
    let b = simulate(&tmp.path().join("b"), &["--supervisor", "verifier", "--mock", "--sequential"]);
    assert_eq!(a.stdout, b.stdout);
    for dir in ["a", "b"] {
        let o = run(&["evaluate", "--input", p(&tmp.path().join(dir)), "--output", p(&tmp.path().join(format!("{dir}-ev"))), "--mock"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let ra = std::fs::read(tmp.path().join("a-ev/report.txt")).unwrap();
    let rb = std::fs::read(tmp.path().join("b-ev/report.txt")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn missing_oracle_labels_fail_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    {
        let store = Store::open(&input).unwrap();
        let cfg = BatchConfig::new(2, 1, vec![PolicyKind::Thorough], Supervisor::None);
        let batch = trajverify::sim::run_batch(Arc::new(SimCatalog::default()), &cfg, Execution::Sequential).unwrap();
        let ep = &batch.episodes[0];
        store.write(Record::Task(ep.spec.task())).unwrap();
        store.write(Record::Trajectory(ep.trajectory.clone())).unwrap();
    }
    let o = run(&["evaluate", "--input", p(&input), "--output", p(&tmp.path().join("out")), "--mock"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("oracle"), "{}", stderr(&o));
}

#[test]
fn online_report_renders_token_multipliers() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("base");
    let sup = tmp.path().join("grounded");
    simulate(&base, &[]);
    simulate(&sup, &["--supervisor", "grounded"]);
    let o = run(&["report", p(&base), p(&sup), "--baseline", p(&base)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("Tokens"));
    let react = text.lines().find(|l| l.starts_with("react ")).unwrap();
    assert!(react.trim_end().ends_with("1x"), "{text}");
    let grounded = text.lines().find(|l| l.starts_with("react+grounded")).unwrap();
    assert!(grounded.trim_end().ends_with('x'));

    // same seed twice is the same run
    let dup = run(&["simulate", "--episodes", "10", "--seed", "4", "--output", p(&base)]);
    assert_eq!(dup.status.code(), Some(1));
}

#[test]
fn report_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(run(&["report", p(&empty)]).status.code(), Some(1));
    assert_eq!(run(&["report", p(&tmp.path().join("missing"))]).status.code(), Some(1));

    let sim = tmp.path().join("sim");
    simulate(&sim, &[]);
    let ev = tmp.path().join("ev");
    assert_eq!(run(&["evaluate", "--input", p(&sim), "--output", p(&ev), "--mock"]).status.code(), Some(0));
    let mixed = run(&["report", p(&sim), p(&ev)]);
    assert_eq!(mixed.status.code(), Some(1));
    assert!(stderr(&mixed).contains("mix"));
}

#[test]
fn flags_override_config_file_which_overrides_env() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    simulate(&input, &[]);
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(&cfg, "method = \"binary\"\nmock = \"grounded\"\n").unwrap();
    let label = |o: &Output| stdout(o).lines().nth(2).unwrap().split_whitespace().next().unwrap().to_string();

    let env_only = bin()
        .args(["evaluate", "--input", p(&input), "--output", p(&tmp.path().join("e"))])
        .env("TRAJVERIFY_METHOD", "pan")
        .env("TRAJVERIFY_MOCK", "grounded")
        .output()
        .unwrap();
    assert_eq!(env_only.status.code(), Some(0), "{}", stderr(&env_only));
    assert_eq!(label(&env_only), "pan");

    let file = bin()
        .args(["--config", p(&cfg), "evaluate", "--input", p(&input), "--output", p(&tmp.path().join("f"))])
        .env("TRAJVERIFY_METHOD", "pan")
        .output()
        .unwrap();
    assert_eq!(label(&file), "nocot-binary");

    let flag = bin()
        .args(["--config", p(&cfg), "evaluate", "--method", "baseline", "--input", p(&input), "--output", p(&tmp.path().join("g"))])
        .env("TRAJVERIFY_METHOD", "pan")
        .output()
        .unwrap();
    assert_eq!(label(&flag), "cot");

    let none = run(&["evaluate", "--input", p(&input), "--output", p(&tmp.path().join("h"))]);
    assert_eq!(none.status.code(), Some(1));
    assert!(stderr(&none).contains("no backend"));
}

/// Minimal chat-completions endpoint whose replies never contain a verdict.
/// It echoes the bearer token so that transcript redaction can be checked.
fn junk_endpoint() -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for conn in listener.incoming() {
            let Ok(conn) = conn else { break };
            let counter = counter.clone();
            std::thread::spawn(move || {
                let mut reader = BufReader::new(conn.try_clone().unwrap());
                let mut conn = conn;
                loop {
                    let mut len = 0usize;
                    let mut auth = String::new();
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    loop {
                        line.clear();
                        reader.read_line(&mut line).unwrap();
                        let l = line.trim_end();
                        if l.is_empty() {
                            break;
                        }
                        let lower = l.to_ascii_lowercase();
                        if let Some(v) = lower.strip_prefix("content-length:") {
                            len = v.trim().parse().unwrap();
                        }
                        if lower.starts_with("authorization:") {
                            auth = l["authorization:".len()..].trim().to_string();
                        }
                    }
                    let mut body = vec![0; len];
                    reader.read_exact(&mut body).unwrap();
                    counter.fetch_add(1, Ordering::SeqCst);
                    let reply = serde_json::json!({
                        "choices": [{"message": {"role": "assistant", "content": format!("I looked at it. {auth}")}, "finish_reason": "stop"}],
                        "usage": {"prompt_tokens": 10, "completion_tokens": 5}
                    })
                    .to_string();
                    let resp = format!(
                        "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{reply}",
                        reply.len()
                    );
                    if conn.write_all(resp.as_bytes()).is_err() {
                        return;
                    }
                }
            });
        }
    });
    (url, hits)
}

#[test]
fn unparseable_verdicts_set_the_exit_code_and_secrets_stay_out_of_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    simulate(&input, &[]);
    let (url, hits) = junk_endpoint();
    let eval = |out: &str, lenient: bool| {
        let mut c = bin();
        c.args(["evaluate", "--input", p(&input), "--output", p(&tmp.path().join(out))])
            .args(["--endpoint", &url, "--model", "judge", "--method", "baseline"])
            .env("TRAJVERIFY_TEST_KEY", "sekrit-123")
            .args(["--api-key-env", "TRAJVERIFY_TEST_KEY"]);
        if lenient {
            c.arg("--lenient");
        }
        c.output().unwrap()
    };
    let strict = eval("strict", false);
    assert_eq!(strict.status.code(), Some(1), "{}", stderr(&strict));
    assert!(stderr(&strict).contains("10 unparseable"), "{}", stderr(&strict));
    assert_eq!(hits.load(Ordering::SeqCst), 10);
    let lenient = eval("lenient", true);
    assert_eq!(lenient.status.code(), Some(2), "{}", stderr(&lenient));

    for dir in ["strict", "lenient"] {
        let root = tmp.path().join(dir);
        let transcripts = std::fs::read_to_string(root.join("transcripts.jsonl")).unwrap();
        assert!(transcripts.contains("I looked at it."));
        for entry in std::fs::read_dir(&root).unwrap() {
            let text = std::fs::read_to_string(entry.unwrap().path()).unwrap_or_default();
            assert!(!text.contains("sekrit-123"), "key leaked into {dir}");
        }
    }
    // the strict run wrote no manifest, the lenient one did
    assert!(Store::open(tmp.path().join("strict")).unwrap().manifests().is_empty());
    assert_eq!(Store::open(tmp.path().join("lenient")).unwrap().manifests().len(), 1);
}

#[test]
fn subset_command_writes_selection_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let records = tmp.path().join("records.jsonl");
    let mut lines = String::new();
    for (d, succ) in [("alpha", [3, 3, 3]), ("beta", [6, 3, 0]), ("gamma", [1, 4, 4])] {
        for (t, s) in succ.iter().enumerate() {
            for i in 0..10 {
                let rec = serde_json::json!({"task_id": format!("{d}-{t}-{i}"), "domain": d, "template_id": format!("t{t}"), "score": u8::from(i < *s)});
                lines.push_str(&format!("{rec}\n"));
            }
        }
    }
    std::fs::write(&records, lines).unwrap();
    let out = tmp.path().join("out");
    let o = run(&["subset", "--records", p(&records), "--fraction", "0.3333333333", "--seed", "7", "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("subset.json")).unwrap()).unwrap();
    assert_eq!(saved["result"]["selected"].as_array().unwrap().len(), 30);
    for line in stdout(&o).lines().skip(1).take(3) {
        assert!(line.trim_end().ends_with("+0.0"), "{line}");
    }
    let bad = run(&["subset", "--records", p(&records), "--fraction", "0", "--output", p(&out)]);
    assert_eq!(bad.status.code(), Some(1));
}

struct Served {
    child: std::process::Child,
    url: String,
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(store: &Path, extra: &[&str]) -> Served {
    let mut child = bin()
        .args(["supervise", "--addr", "127.0.0.1:0", "--store", p(store)])
        .args(extra)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut first = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut first).unwrap();
    let url = first.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected banner `{first}`")).to_string();
    Served { child, url }
}

fn terminate(served: &mut Served) -> std::process::ExitStatus {
    let pid = served.child.id().to_string();
    assert!(Command::new("kill").args(["-TERM", &pid]).status().unwrap().success());
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        if let Some(status) = served.child.try_wait().unwrap() {
            return status;
        }
        assert!(Instant::now() < deadline, "server ignored SIGTERM");
        std::thread::sleep(Duration::from_millis(50));
    }
}

#[test]
fn supervise_serves_sessions_and_drains_on_sigterm() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("svc");
    let mut served = serve(&store, &["--mock", "--method", "sgv"]);
    let client = HttpClient::new(served.url.clone()).unwrap();

    let cfg = BatchConfig::new(1, 9, vec![PolicyKind::Backtracking], Supervisor::None);
    let ep = cfg.specs(&SimCatalog::default()).remove(0);
    let episode = run_episode(Arc::new(SimCatalog::default()), &ep, &client, |t| cfg.session(t)).unwrap();
    assert_eq!(episode.stats.status, SessionStatus::Accepted);
    assert_eq!(episode.stats.outcome, Some(VerdictLabel::Success));
    assert!(episode.oracles.strict);

    let open = trajverify::supervision::SessionClient::open(&client, cfg.session(ep.task())).unwrap();
    let status = terminate(&mut served);
    assert!(status.success(), "{status:?}");
    let stats: Vec<EpisodeStats> = Store::open(&store).unwrap().read_aux(EPISODES_FILE).unwrap();
    assert_eq!(stats.len(), 2);
    assert_eq!(stats[1].session_id, open);
    assert_eq!(stats[1].status, SessionStatus::Aborted);

    // restarting on the same store with another verifier is refused
    let clash = bin()
        .args(["supervise", "--addr", "127.0.0.1:0", "--store", p(&store), "--mock", "--method", "baseline"])
        .output()
        .unwrap();
    assert_eq!(clash.status.code(), Some(1));
    assert!(stderr(&clash).contains("config"), "{}", stderr(&clash));
}

#[test]
fn second_supervisor_on_a_taken_port_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let served = serve(&tmp.path().join("a"), &["--no-verify"]);
    let addr = served.url.trim_start_matches("http://").to_string();
    let o = run(&["supervise", "--addr", &addr, "--store", p(&tmp.path().join("b")), "--no-verify"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cannot bind"), "{}", stderr(&o));
}
