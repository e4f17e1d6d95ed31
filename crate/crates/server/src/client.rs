use std::time::Duration;

use reqwest::blocking::{Client, Response};
use serde::de::DeserializeOwned;
use serde::Serialize;
use trajverify::supervision::{
    Directive, EpisodeStats, OracleResult, SessionClient, SessionSpec, SessionView, StepSubmission, SupervisionError,
};

use crate::{CloseRequest, ErrorBody, Health, Opened, StepRequest};

/// Blocking client for the supervision API. Do not call from inside an
/// async runtime.
#[derive(Debug, Clone)]
pub struct HttpClient {
    base: String,
    http: Client,
}

fn transport(e: reqwest::Error) -> SupervisionError {
    SupervisionError::Remote { status: e.status().map_or(0, |s| s.as_u16()), message: e.to_string() }
}

fn decode<T: DeserializeOwned>(resp: Response) -> Result<T, SupervisionError> {
    let status = resp.status();
    if status.is_success() {
        return resp.json().map_err(transport);
    }
    let text = resp.text().unwrap_or_default();
    let message = serde_json::from_str::<ErrorBody>(&text).map(|b| format!("{}: {}", b.error, b.message)).unwrap_or(text);
    Err(SupervisionError::Remote { status: status.as_u16(), message })
}

impl HttpClient {
    pub fn new(base: impl Into<String>) -> Result<Self, SupervisionError> {
        let http = Client::builder().timeout(Duration::from_secs(600)).build().map_err(transport)?;
        Ok(Self { base: base.into().trim_end_matches('/').to_string(), http })
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, SupervisionError> {
        decode(self.http.post(format!("{}{path}", self.base)).json(body).send().map_err(transport)?)
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, SupervisionError> {
        decode(self.http.get(format!("{}{path}", self.base)).send().map_err(transport)?)
    }

    pub fn health(&self) -> Result<Health, SupervisionError> {
        self.get("/health")
    }

    pub fn view(&self, session_id: &str) -> Result<SessionView, SupervisionError> {
        self.get(&format!("/sessions/{session_id}"))
    }

    /// Step with inline screenshot bytes.
    pub fn step_with_screenshot(
        &self,
        session_id: &str,
        sub: StepSubmission,
        media_type: &str,
        bytes: &[u8],
    ) -> Result<Directive, SupervisionError> {
        use base64::Engine;
        let req = StepRequest {
            step: sub,
            screenshot_b64: Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
            screenshot_media_type: Some(media_type.to_string()),
        };
        self.post(&format!("/sessions/{session_id}/steps"), &req)
    }
}

impl SessionClient for HttpClient {
    fn open(&self, spec: SessionSpec) -> Result<String, SupervisionError> {
        let opened: Opened = self.post("/sessions", &spec)?;
        Ok(opened.session_id)
    }

    fn step(&self, session_id: &str, sub: StepSubmission) -> Result<Directive, SupervisionError> {
        self.post(&format!("/sessions/{session_id}/steps"), &StepRequest::from(sub))
    }

    fn close(&self, session_id: &str, oracle: Option<OracleResult>) -> Result<EpisodeStats, SupervisionError> {
        self.post(&format!("/sessions/{session_id}/close"), &CloseRequest { oracle })
    }
}
