//! HTTP API for supervision sessions.
//!
//! | method | path                   | body              | reply        |
//! |--------|------------------------|-------------------|--------------|
//! | GET    | `/health`              |                   | `Health`     |
//! | POST   | `/sessions`            | `SessionSpec`     | `Opened`     |
//! | GET    | `/sessions/{id}`       |                   | `SessionView`|
//! | POST   | `/sessions/{id}/steps` | `StepRequest`     | `Directive`  |
//! | POST   | `/sessions/{id}/close` | `CloseRequest`    | `EpisodeStats`|
//!
//! Errors come back as `{"error": kind, "message": text}`.

mod client;

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use trajverify::store::Store;
use trajverify::supervision::{EpisodeStats, OracleResult, SessionSpec, StepSubmission, SupervisionError, SupervisionService};

pub use client::HttpClient;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
    #[error("drain: {0}")]
    Drain(#[from] SupervisionError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub open_sessions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Opened {
    pub session_id: String,
}

/// A step, optionally with the screenshot inline as base64. Inline bytes are
/// written to the image store and replace `state.screenshot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRequest {
    #[serde(flatten)]
    pub step: StepSubmission,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screenshot_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screenshot_media_type: Option<String>,
}

impl From<StepSubmission> for StepRequest {
    fn from(step: StepSubmission) -> Self {
        Self { step, screenshot_b64: None, screenshot_media_type: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CloseRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, ErrorBody { error: "bad_request".into(), message: message.into() })
    }
}

impl From<SupervisionError> for ApiError {
    fn from(e: SupervisionError) -> Self {
        let (status, kind) = match &e {
            SupervisionError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            SupervisionError::InvalidBudgets(_) => (StatusCode::BAD_REQUEST, "invalid_budgets"),
            SupervisionError::InvalidTask(_) => (StatusCode::BAD_REQUEST, "invalid_task"),
            SupervisionError::Terminal(..) => (StatusCode::CONFLICT, "terminal"),
            SupervisionError::OutOfOrder { .. } => (StatusCode::CONFLICT, "out_of_order"),
            SupervisionError::ConfigMismatch { .. } => (StatusCode::CONFLICT, "config_mismatch"),
            SupervisionError::Store(_) => (StatusCode::INTERNAL_SERVER_ERROR, "store"),
            SupervisionError::Remote { status, .. } => {
                (StatusCode::from_u16(*status).unwrap_or(StatusCode::BAD_GATEWAY), "remote")
            }
        };
        ApiError(status, ErrorBody { error: kind.into(), message: e.to_string() })
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(e.status(), ErrorBody { error: "bad_body".into(), message: e.body_text() })
    }
}

/// `Json` whose rejections use the error body.
#[derive(FromRequest)]
#[from_request(via(Json), rejection(ApiError))]
struct Body<T>(T);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

#[derive(Clone)]
struct AppState {
    service: Arc<SupervisionService>,
    store: Option<Arc<Store>>,
}

/// Verification can block on the gateway, so service calls run on the
/// blocking pool.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, SupervisionError> + Send + 'static,
) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError(
            StatusCode::INTERNAL_SERVER_ERROR,
            ErrorBody { error: "internal".into(), message: e.to_string() },
        )),
    }
}

async fn health(State(app): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        config_digest: app.service.config_digest(),
        open_sessions: app.service.open_sessions().len(),
    })
}

async fn open(State(app): State<AppState>, Body(spec): Body<SessionSpec>) -> Result<(StatusCode, Json<Opened>), ApiError> {
    let svc = app.service.clone();
    let session_id = blocking(move || svc.open_session(spec)).await?;
    Ok((StatusCode::CREATED, Json(Opened { session_id })))
}

async fn view(State(app): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(app.service.view(&id)?))
}

async fn step(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<StepRequest>,
) -> Result<impl IntoResponse, ApiError> {
    let mut sub = req.step;
    if let Some(b64) = req.screenshot_b64 {
        let store = app.store.clone().ok_or_else(|| ApiError::bad_request("inline screenshots need a server store"))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64.trim())
            .map_err(|e| ApiError::bad_request(format!("screenshot_b64: {e}")))?;
        let media = req.screenshot_media_type.unwrap_or_else(|| "image/png".into());
        let shot = store.put_image(&id, sub.state.index, &media, &bytes).map_err(SupervisionError::from)?;
        sub.state.screenshot = Some(shot);
    }
    let svc = app.service.clone();
    Ok(Json(blocking(move || svc.submit_step(&id, sub)).await?))
}

async fn close(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Option<Json<CloseRequest>>,
) -> Result<Json<EpisodeStats>, ApiError> {
    let oracle = body.and_then(|Json(b)| b.oracle);
    let svc = app.service.clone();
    Ok(Json(blocking(move || svc.close_session(&id, oracle)).await?))
}

/// Routes over `service`. With a store, inline screenshots are accepted.
pub fn router(service: Arc<SupervisionService>, store: Option<Arc<Store>>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(open))
        .route("/sessions/{id}", get(view))
        .route("/sessions/{id}/steps", post(step))
        .route("/sessions/{id}/close", post(close))
        .with_state(AppState { service, store })
}

pub async fn bind(addr: &str) -> Result<TcpListener, ServerError> {
    TcpListener::bind(addr).await.map_err(|source| ServerError::Bind { addr: addr.to_string(), source })
}

/// Serves until `shutdown` resolves, lets in-flight requests finish, then
/// closes every remaining session. Returns the drained sessions' stats.
pub async fn serve(
    listener: TcpListener,
    service: Arc<SupervisionService>,
    store: Option<Arc<Store>>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<Vec<EpisodeStats>, ServerError> {
    if let Ok(addr) = listener.local_addr() {
        log::info!("supervision service listening on {addr}");
    }
    axum::serve(listener, router(service.clone(), store)).with_graceful_shutdown(shutdown).await?;
    let drained = tokio::task::spawn_blocking(move || service.drain())
        .await
        .map_err(|e| ServerError::Io(std::io::Error::other(e)))??;
    log::info!("drained {} open session(s)", drained.len());
    Ok(drained)
}

/// Resolves on SIGINT or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// A server on its own runtime thread, for embedding and tests.
pub struct Background {
    addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<Result<Vec<EpisodeStats>, ServerError>>>,
}

impl Background {
    pub fn start(addr: &str, service: Arc<SupervisionService>, store: Option<Arc<Store>>) -> Result<Self, ServerError> {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let listener = rt.block_on(bind(addr))?;
        let local = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            rt.block_on(serve(listener, service, store, async {
                let _ = rx.await;
            }))
        });
        Ok(Self { addr: local, stop: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops the server and returns the stats of sessions it had to abort.
    pub fn shutdown(mut self) -> Result<Vec<EpisodeStats>, ServerError> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> Result<Vec<EpisodeStats>, ServerError> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(ServerError::Io(std::io::Error::other("server thread panicked")))),
            None => Ok(Vec::new()),
        }
    }
}

impl Drop for Background {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}
