use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_ENDPOINT: &str = "https://api.github.com/graphql";

const USER_AGENT: &str = concat!(env!("CARGO_PKG_NAME"), "/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphqlRequest {
    pub endpoint: String,
    #[serde(skip_serializing)]
    pub token: String,
    pub body: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
    /// `x-ratelimit-reset`, seconds since the epoch.
    pub rate_limit_reset: Option<i64>,
    /// `retry-after`, seconds.
    pub retry_after: Option<u64>,
}

impl HttpResponse {
    pub fn new(status: u16, body: impl Into<String>) -> Self {
        HttpResponse { status, body: body.into(), ..Default::default() }
    }
}

/// Failure below HTTP (connect, TLS, timeout).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("transport failure: {0}")]
pub struct TransportError(pub String);

pub trait Transport: Send + Sync {
    fn post(&self, request: &GraphqlRequest) -> Result<HttpResponse, TransportError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .user_agent(USER_AGENT)
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpTransport { client })
    }
}

fn header_number<T: std::str::FromStr>(headers: &reqwest::header::HeaderMap, name: &str) -> Option<T> {
    headers.get(name)?.to_str().ok()?.trim().parse().ok()
}

impl Transport for HttpTransport {
    fn post(&self, request: &GraphqlRequest) -> Result<HttpResponse, TransportError> {
        let resp = self
            .client
            .post(&request.endpoint)
            .bearer_auth(&request.token)
            .json(&request.body)
            .send()
            .map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let rate_limit_reset = header_number(resp.headers(), "x-ratelimit-reset");
        let retry_after = header_number(resp.headers(), "retry-after");
        let body = resp.text().map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpResponse { status, body, rate_limit_reset, retry_after })
    }
}

/// A request as seen by [`ScriptedTransport`].
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub token: String,
    pub endpoint: String,
    pub variables: serde_json::Value,
}

type Responder = dyn Fn(&GraphqlRequest, usize) -> Result<HttpResponse, TransportError> + Send + Sync;

/// Fake server driven by a closure. The closure receives the request and the
/// zero-based global call index; every request is recorded.
pub struct ScriptedTransport {
    responder: Box<Responder>,
    log: Mutex<Vec<RecordedRequest>>,
}

impl ScriptedTransport {
    pub fn new<F>(responder: F) -> Self
    where
        F: Fn(&GraphqlRequest, usize) -> Result<HttpResponse, TransportError> + Send + Sync + 'static,
    {
        ScriptedTransport { responder: Box::new(responder), log: Mutex::new(Vec::new()) }
    }

    /// Replays `responses` in order; calls beyond the script get a 500.
    pub fn sequence(responses: Vec<Result<HttpResponse, TransportError>>) -> Self {
        Self::new(move |_, i| responses.get(i).cloned().unwrap_or_else(|| Ok(HttpResponse::new(500, ""))))
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.log.lock().unwrap().clone()
    }

    pub fn tokens_used(&self) -> Vec<String> {
        self.requests().into_iter().map(|r| r.token).collect()
    }
}

impl Transport for ScriptedTransport {
    fn post(&self, request: &GraphqlRequest) -> Result<HttpResponse, TransportError> {
        let index = {
            let mut log = self.log.lock().unwrap();
            log.push(RecordedRequest {
                token: request.token.clone(),
                endpoint: request.endpoint.clone(),
                variables: request.body.get("variables").cloned().unwrap_or_default(),
            });
            log.len() - 1
        };
        (self.responder)(request, index)
    }
}
