use std::sync::Arc;

use trajverify::exec::Execution;
use trajverify::model::{ActionRecord, State, Task, VerdictLabel};
use trajverify::sim::*;
use trajverify::store::Store;
use trajverify::supervision::{
    Directive, EpisodeStats, HaltReason, SessionClient, SessionSpec, SessionStatus, StepSubmission, SupervisionError,
    SupervisionService, EPISODES_FILE,
};
use trajverify_server::{Background, HttpClient, ServerError};

fn catalog() -> Arc<SimCatalog> {
    Arc::new(SimCatalog::default())
}

fn episode(policy: PolicyKind, seed: u64) -> EpisodeSpec {
    let cfg = BatchConfig::new(1, seed, vec![policy], Supervisor::None);
    cfg.specs(&catalog()).remove(0)
}

fn grounded(eps: &[EpisodeSpec]) -> Arc<SupervisionService> {
    Arc::new(Supervisor::Mock(MockKind::Grounded).service(catalog(), eps))
}

fn step(seq: u64, action: &str) -> StepSubmission {
    StepSubmission {
        seq,
        state: State::with_text(seq as u32, format!("page {seq}")),
        action: ActionRecord::parsed(action),
        agent_usage: Default::default(),
    }
}

fn task() -> Task {
    Task::new("t1", trajverify::model::Domain::Sim, "find something")
}

fn status(err: SupervisionError) -> u16 {
    match err {
        SupervisionError::Remote { status, .. } => status,
        other => panic!("expected a remote error, got {other}"),
    }
}

#[test]
fn backtracking_episode_over_http_succeeds_after_feedback() {
    let ep = episode(PolicyKind::Backtracking, 3);
    let server = Background::start("127.0.0.1:0", grounded(std::slice::from_ref(&ep)), None).unwrap();
    let client = HttpClient::new(server.url()).unwrap();
    let remote = run_episode(catalog(), &ep, &client, SessionSpec::stop_triggered).unwrap();
    assert_eq!(remote.stats.status, SessionStatus::Accepted);
    assert_eq!(remote.stats.outcome, Some(VerdictLabel::Success));
    assert_eq!(remote.stats.feedback_count, 1);
    assert!(remote.oracles.strict);

    // same episode in process gives the same trajectory and counts
    let local = run_episode(catalog(), &ep, &*grounded(std::slice::from_ref(&ep)), SessionSpec::stop_triggered).unwrap();
    assert_eq!(local.trajectory, remote.trajectory);
    assert_eq!(local.stats.verification_count, remote.stats.verification_count);
    assert!(server.shutdown().unwrap().is_empty());
}

#[test]
fn never_stopping_agent_hits_the_budget() {
    let server = Background::start("127.0.0.1:0", Arc::new(SupervisionService::new(None)), None).unwrap();
    let client = HttpClient::new(server.url()).unwrap();
    let sid = client.open(SessionSpec::stop_triggered(task()).with_budget(3)).unwrap();
    for seq in 0..3 {
        assert_eq!(client.step(&sid, step(seq, "scroll [down]")).unwrap(), Directive::Continue);
    }
    assert_eq!(client.step(&sid, step(3, "scroll [down]")).unwrap(), Directive::Halt { reason: HaltReason::BudgetExhausted });
    let stats = client.close(&sid, None).unwrap();
    assert_eq!(stats.status, SessionStatus::Exhausted);
    assert_eq!(stats.steps_used, 3);
}

#[test]
fn protocol_errors_map_to_status_codes() {
    let server = Background::start("127.0.0.1:0", Arc::new(SupervisionService::new(None)), None).unwrap();
    let client = HttpClient::new(server.url()).unwrap();
    let sid = client.open(SessionSpec::stop_triggered(task())).unwrap();
    let first = client.step(&sid, step(0, "click [1]")).unwrap();
    assert_eq!(client.step(&sid, step(0, "click [2]")).unwrap(), first, "duplicate resend");
    client.step(&sid, step(2, "click [3]")).unwrap();
    assert_eq!(status(client.step(&sid, step(1, "click [4]")).unwrap_err()), 409);
    assert_eq!(status(client.step("s999999", step(0, "click [1]")).unwrap_err()), 404);
    assert_eq!(status(client.close("s999999", None).unwrap_err()), 404);
    assert_eq!(status(client.open(SessionSpec::stop_triggered(task()).with_budget(0)).unwrap_err()), 400);
    assert_eq!(status(client.open(SessionSpec::periodic(task(), 0)).unwrap_err()), 400);

    assert_eq!(client.step(&sid, step(3, "stop [done]")).unwrap(), Directive::Halt { reason: HaltReason::Accepted });
    assert_eq!(status(client.step(&sid, step(4, "click [1]")).unwrap_err()), 409);
    let stats = client.close(&sid, None).unwrap();
    assert_eq!(client.close(&sid, None).unwrap(), stats);
    assert_eq!(status(client.step(&sid, step(5, "click [1]")).unwrap_err()), 409);
    assert!(status(client.step(&sid, step(5, "click [1]")).unwrap_err()) < 500);
}

#[test]
fn view_reports_progress() {
    let server = Background::start("127.0.0.1:0", Arc::new(SupervisionService::new(None)), None).unwrap();
    let client = HttpClient::new(server.url()).unwrap();
    let sid = client.open(SessionSpec::stop_triggered(task()).with_budget(7)).unwrap();
    client.step(&sid, step(0, "click [1]")).unwrap();
    let v = client.view(&sid).unwrap();
    assert_eq!((v.steps, v.step_budget, v.status), (1, 7, SessionStatus::Open));
    assert_eq!(client.health().unwrap().open_sessions, 1);
}

#[test]
fn mismatched_verifier_digest_is_rejected() {
    let ep = episode(PolicyKind::Thorough, 1);
    let server = Background::start("127.0.0.1:0", grounded(std::slice::from_ref(&ep)), None).unwrap();
    let client = HttpClient::new(server.url()).unwrap();
    let digest = client.health().unwrap().config_digest.unwrap();
    let mut spec = SessionSpec::stop_triggered(ep.task());
    spec.config_digest = Some(digest);
    client.open(spec.clone()).unwrap();
    spec.config_digest = Some("something-else".into());
    assert_eq!(status(client.open(spec).unwrap_err()), 409);
}

#[test]
fn shutdown_aborts_open_sessions_and_flushes_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(tmp.path()).unwrap());
    let svc = Arc::new(SupervisionService::new(None).with_store(store.clone()));
    let server = Background::start("127.0.0.1:0", svc, Some(store.clone())).unwrap();
    let client = HttpClient::new(server.url()).unwrap();
    let open = client.open(SessionSpec::stop_triggered(task())).unwrap();
    client.step(&open, step(0, "click [1]")).unwrap();
    let done = client.open(SessionSpec::stop_triggered(task())).unwrap();
    client.step(&done, step(0, "stop [x]")).unwrap();
    client.close(&done, None).unwrap();

    let drained = server.shutdown().unwrap();
    assert_eq!(drained.len(), 1);
    assert_eq!(drained[0].session_id, open);
    assert_eq!(drained[0].status, SessionStatus::Aborted);
    let logged: Vec<EpisodeStats> = store.read_aux(EPISODES_FILE).unwrap();
    assert_eq!(logged.len(), 2);
    assert_eq!(logged[1], drained[0]);
}

#[test]
fn second_server_on_same_port_fails_to_bind() {
    let first = Background::start("127.0.0.1:0", Arc::new(SupervisionService::new(None)), None).unwrap();
    let addr = first.addr().to_string();
    let err = Background::start(&addr, Arc::new(SupervisionService::new(None)), None).err().unwrap();
    assert!(matches!(err, ServerError::Bind { .. }), "{err}");
}

#[test]
fn inline_screenshot_is_stored_and_referenced() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(tmp.path()).unwrap());
    let svc = Arc::new(SupervisionService::new(None));
    let server = Background::start("127.0.0.1:0", svc.clone(), Some(store)).unwrap();
    let client = HttpClient::new(server.url()).unwrap();
    let sid = client.open(SessionSpec::stop_triggered(task())).unwrap();
    client.step_with_screenshot(&sid, step(0, "click [1]"), "image/png", b"\x89PNG fake").unwrap();
    let shot = svc.trajectory(&sid).unwrap().steps[0].state.screenshot.clone().unwrap();
    assert_eq!(shot.uri, format!("images/{sid}/0.png"));
    assert_eq!(std::fs::read(tmp.path().join(&shot.uri)).unwrap(), b"\x89PNG fake");

    // without a store the bytes have nowhere to go
    let bare = Background::start("127.0.0.1:0", Arc::new(SupervisionService::new(None)), None).unwrap();
    let c2 = HttpClient::new(bare.url()).unwrap();
    let sid = c2.open(SessionSpec::stop_triggered(task())).unwrap();
    assert_eq!(status(c2.step_with_screenshot(&sid, step(0, "click [1]"), "image/png", b"x").unwrap_err()), 400);
}

#[test]
fn concurrent_sessions_match_sequential_batch() {
    let cfg = BatchConfig::new(12, 21, PolicyKind::ALL.to_vec(), Supervisor::Mock(MockKind::Grounded));
    let specs = cfg.specs(&catalog());
    let server = Background::start("127.0.0.1:0", grounded(&specs), None).unwrap();
    let url = server.url();
    let remote: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = specs
            .iter()
            .map(|ep| {
                let url = url.clone();
                let cfg = &cfg;
                s.spawn(move || {
                    let client = HttpClient::new(url).unwrap();
                    run_episode(catalog(), ep, &client, |t| cfg.session(t)).unwrap()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let local = run_batch(catalog(), &cfg, Execution::Sequential).unwrap();
    for (r, l) in remote.iter().zip(&local.episodes) {
        assert_eq!(r.trajectory, l.trajectory);
        assert_eq!(r.stats.outcome, l.stats.outcome);
        assert_eq!(r.stats.feedback_count, l.stats.feedback_count);
    }
}

#[test]
fn malformed_body_gets_an_error_body() {
    let server = Background::start("127.0.0.1:0", grounded(&[]), None).unwrap();
    let http = reqwest::blocking::Client::new();
    let resp = http
        .post(format!("{}/sessions", server.url()))
        .header("content-type", "application/json")
        .body(r#"{"task": 3}"#)
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 422);
    let body: trajverify_server::ErrorBody = resp.json().unwrap();
    assert_eq!(body.error, "bad_body");
    assert!(body.message.contains("task"), "{}", body.message);
}
