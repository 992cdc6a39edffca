//! Per-PR metadata retrieval from the GitHub GraphQL API.
//!
//! One PR per request. Retriable failures (403 rate limits, 5xx, transport
//! errors) consume attempts from the [`RetryPolicy`]; 404, 410 and 451 are
//! terminal on first sight.

mod clock;
mod retry;
mod tokens;
mod transport;

use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub use clock::{Clock, ManualClock, SystemClock};
pub use retry::{backoff_delay, BackoffError, RetryPolicy};
pub use tokens::{TokenError, TokenLease, TokenPool};
pub use transport::{
    GraphqlRequest, HttpResponse, HttpTransport, RecordedRequest, ScriptedTransport, Transport,
    TransportError, DEFAULT_ENDPOINT,
};

use crate::corpus::split_pr_key;
use crate::status::StatusCode;

pub const PR_QUERY: &str = "query($owner: String!, $name: String!, $number: Int!) { \
repository(owner: $owner, name: $name) { nameWithOwner stargazerCount forkCount \
primaryLanguage { name } isArchived isFork \
pullRequest(number: $number) { state createdAt closedAt mergedAt baseRefName headRefName \
baseRefOid headRefOid mergeable } } }";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetadataState {
    Open,
    Closed,
    Merged,
}

impl MetadataState {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetadataState::Open => "open",
            MetadataState::Closed => "closed",
            MetadataState::Merged => "merged",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeableSignal {
    Mergeable,
    Conflicting,
    Unknown,
}

impl MergeableSignal {
    pub fn as_str(&self) -> &'static str {
        match self {
            MergeableSignal::Mergeable => "mergeable",
            MergeableSignal::Conflicting => "conflicting",
            MergeableSignal::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrMetadata {
    pub pr_key: String,
    pub state: MetadataState,
    pub created_at: Option<DateTime<Utc>>,
    pub closed_at: Option<DateTime<Utc>>,
    pub merged_at: Option<DateTime<Utc>>,
    pub base_ref_name: String,
    pub head_ref_name: String,
    pub base_ref_oid: String,
    pub head_ref_oid: String,
    pub mergeable_signal: MergeableSignal,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RepositoryRecord {
    pub repo_full_name: String,
    pub stars: u64,
    pub forks: u64,
    pub primary_language: Option<String>,
    pub is_archived: bool,
    pub is_fork: bool,
}

pub fn is_object_id(s: &str) -> bool {
    s.len() == 40 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FetchCode {
    Ok,
    RateLimited,
    NotFound,
    Gone,
    LegalBlock,
    ServerError,
    AuthFailed,
    ExhaustedRetries,
}

impl FetchCode {
    pub fn status_code(&self) -> StatusCode {
        match self {
            FetchCode::Ok => StatusCode::Ok,
            FetchCode::RateLimited => StatusCode::RateLimited,
            FetchCode::NotFound => StatusCode::NotFound,
            FetchCode::Gone => StatusCode::Gone,
            FetchCode::LegalBlock => StatusCode::LegalBlock,
            FetchCode::ServerError => StatusCode::ServerError,
            FetchCode::AuthFailed => StatusCode::AuthFailed,
            FetchCode::ExhaustedRetries => StatusCode::ExhaustedRetries,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchStatus {
    pub code: FetchCode,
    pub http_status: Option<u16>,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub token_index: usize,
    pub http_status: Option<u16>,
}

/// Result of one `fetch_pr_metadata` call. `metadata` is present exactly
/// when `status.code` is OK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchOutcome {
    pub pr_key: String,
    pub status: FetchStatus,
    pub metadata: Option<PrMetadata>,
    pub repository: Option<RepositoryRecord>,
    pub attempts: Vec<AttemptRecord>,
    pub message: Option<String>,
}

impl FetchOutcome {
    pub fn is_ok(&self) -> bool {
        self.status.code == FetchCode::Ok
    }
}

#[derive(Debug, Error)]
pub enum MetadataError {
    #[error("invalid pr_key {0:?}")]
    InvalidPrKey(String),
}

// GraphQL payload shapes

#[derive(Deserialize)]
struct GqlEnvelope {
    data: Option<GqlData>,
    #[serde(default)]
    errors: Vec<GqlError>,
}

#[derive(Deserialize)]
struct GqlError {
    #[serde(rename = "type")]
    kind: Option<String>,
    message: Option<String>,
}

#[derive(Deserialize)]
struct GqlData {
    repository: Option<GqlRepository>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct GqlRepository {
    name_with_owner: Option<String>,
    #[serde(default)]
    stargazer_count: u64,
    #[serde(default)]
    fork_count: u64,
    primary_language: Option<GqlLanguage>,
    #[serde(default)]
    is_archived: bool,
    #[serde(default)]
    is_fork: bool,
    pull_request: Option<GqlPullRequest>,
}

#[derive(Serialize, Deserialize)]
struct GqlLanguage {
    name: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct GqlPullRequest {
    state: String,
    created_at: Option<DateTime<Utc>>,
    closed_at: Option<DateTime<Utc>>,
    merged_at: Option<DateTime<Utc>>,
    base_ref_name: Option<String>,
    head_ref_name: Option<String>,
    base_ref_oid: Option<String>,
    head_ref_oid: Option<String>,
    mergeable: Option<String>,
}

/// Renders a GraphQL success body for `meta`; used by fake servers.
pub fn render_response(repo: &RepositoryRecord, meta: &PrMetadata) -> String {
    let pr = GqlPullRequest {
        state: meta.state.as_str().to_ascii_uppercase(),
        created_at: meta.created_at,
        closed_at: meta.closed_at,
        merged_at: meta.merged_at,
        base_ref_name: Some(meta.base_ref_name.clone()),
        head_ref_name: Some(meta.head_ref_name.clone()),
        base_ref_oid: Some(meta.base_ref_oid.clone()),
        head_ref_oid: Some(meta.head_ref_oid.clone()),
        mergeable: Some(meta.mergeable_signal.as_str().to_ascii_uppercase()),
    };
    let repository = GqlRepository {
        name_with_owner: Some(repo.repo_full_name.clone()),
        stargazer_count: repo.stars,
        fork_count: repo.forks,
        primary_language: repo.primary_language.clone().map(|name| GqlLanguage { name }),
        is_archived: repo.is_archived,
        is_fork: repo.is_fork,
        pull_request: Some(pr),
    };
    json!({ "data": { "repository": repository } }).to_string()
}

enum BodyVerdict {
    Parsed(Box<(PrMetadata, RepositoryRecord)>),
    RateLimited,
    NotFound(String),
    Malformed(String),
}

fn parse_body(pr_key: &str, repo_full_name: &str, body: &str) -> BodyVerdict {
    let envelope: GqlEnvelope = match serde_json::from_str(body) {
        Ok(e) => e,
        Err(e) => return BodyVerdict::Malformed(format!("response is not GraphQL JSON: {e}")),
    };
    if envelope.errors.iter().any(|e| e.kind.as_deref() == Some("RATE_LIMITED")) {
        return BodyVerdict::RateLimited;
    }
    let repo = envelope.data.and_then(|d| d.repository);
    let Some(repo) = repo else {
        let message = envelope
            .errors
            .first()
            .and_then(|e| e.message.clone())
            .unwrap_or_else(|| "repository not returned".to_string());
        return BodyVerdict::NotFound(message);
    };
    let Some(pr) = repo.pull_request else {
        return BodyVerdict::NotFound("pull request not returned".to_string());
    };
    let state = match pr.state.to_ascii_uppercase().as_str() {
        "OPEN" => MetadataState::Open,
        "CLOSED" => MetadataState::Closed,
        "MERGED" => MetadataState::Merged,
        other => return BodyVerdict::Malformed(format!("unknown pull request state {other:?}")),
    };
    let (Some(base_oid), Some(head_oid)) = (pr.base_ref_oid, pr.head_ref_oid) else {
        return BodyVerdict::NotFound("base or head reference missing".to_string());
    };
    let base_oid = base_oid.to_ascii_lowercase();
    let head_oid = head_oid.to_ascii_lowercase();
    if !is_object_id(&base_oid) || !is_object_id(&head_oid) {
        return BodyVerdict::Malformed("object IDs are not 40 hex characters".to_string());
    }
    if state == MetadataState::Merged && pr.merged_at.is_none() {
        return BodyVerdict::Malformed("merged pull request without mergedAt".to_string());
    }
    let mergeable_signal = match pr.mergeable.as_deref().map(str::to_ascii_uppercase).as_deref() {
        Some("MERGEABLE") => MergeableSignal::Mergeable,
        Some("CONFLICTING") => MergeableSignal::Conflicting,
        _ => MergeableSignal::Unknown,
    };
    let metadata = PrMetadata {
        pr_key: pr_key.to_string(),
        state,
        created_at: pr.created_at,
        closed_at: pr.closed_at,
        merged_at: pr.merged_at,
        base_ref_name: pr.base_ref_name.unwrap_or_default(),
        head_ref_name: pr.head_ref_name.unwrap_or_default(),
        base_ref_oid: base_oid,
        head_ref_oid: head_oid,
        mergeable_signal,
    };
    let repository = RepositoryRecord {
        repo_full_name: repo_full_name.to_string(),
        stars: repo.stargazer_count,
        forks: repo.fork_count,
        primary_language: repo.primary_language.map(|l| l.name),
        is_archived: repo.is_archived,
        is_fork: repo.is_fork,
    };
    BodyVerdict::Parsed(Box::new((metadata, repository)))
}

pub struct MetadataClient {
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    pool: TokenPool,
    policy: RetryPolicy,
    endpoint: String,
}

enum Step {
    Done(FetchCode, Option<String>, Option<Box<(PrMetadata, RepositoryRecord)>>),
    Retry(FetchCode, Option<String>),
}

impl MetadataClient {
    pub fn new(transport: Arc<dyn Transport>, clock: Arc<dyn Clock>, pool: TokenPool, policy: RetryPolicy) -> Self {
        MetadataClient { transport, clock, pool, policy, endpoint: DEFAULT_ENDPOINT.to_string() }
    }

    pub fn with_endpoint(mut self, endpoint: impl Into<String>) -> Self {
        self.endpoint = endpoint.into();
        self
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    pub fn fetch_pr_metadata(&self, pr_key: &str) -> Result<FetchOutcome, MetadataError> {
        let (repo, number) = split_pr_key(pr_key).ok_or_else(|| MetadataError::InvalidPrKey(pr_key.to_string()))?;
        let (owner, name) = repo.split_once('/').expect("validated repository name");
        let body = json!({
            "query": PR_QUERY,
            "variables": { "owner": owner, "name": name, "number": number },
        });

        let mut attempts = Vec::new();
        let mut last_http = None;
        let max_attempts = self.policy.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            if attempt > 1 {
                let delay = backoff_delay(attempt - 1, &self.policy).unwrap_or(self.policy.max_delay);
                self.clock.sleep(delay);
            }

            let lease = match self.lease_token() {
                Ok(lease) => lease,
                Err(message) => {
                    return Ok(self.finish(pr_key, FetchCode::RateLimited, last_http, attempts, Some(message), None));
                }
            };
            let request = GraphqlRequest { endpoint: self.endpoint.clone(), token: lease.token.clone(), body: body.clone() };
            let response = self.transport.post(&request);
            let http_status = response.as_ref().ok().map(|r| r.status);
            last_http = http_status;
            attempts.push(AttemptRecord { attempt, token_index: lease.index, http_status });

            let step = match response {
                Err(err) => Step::Retry(FetchCode::ExhaustedRetries, Some(err.to_string())),
                Ok(resp) => self.classify(pr_key, repo, lease.index, attempt, resp),
            };
            match step {
                Step::Done(code, message, payload) => {
                    return Ok(self.finish(pr_key, code, last_http, attempts, message, payload));
                }
                Step::Retry(code, message) if attempt >= max_attempts => {
                    return Ok(self.finish(pr_key, code, last_http, attempts, message, None));
                }
                Step::Retry(code, message) => {
                    tracing::debug!(pr_key, attempt, ?code, ?message, "retrying metadata request");
                }
            }
        }
    }

    fn lease_token(&self) -> Result<TokenLease, String> {
        loop {
            let now = self.clock.now();
            match self.pool.next_token(now) {
                Ok(lease) => return Ok(lease),
                Err(TokenError::Empty) => return Err("token pool is empty".to_string()),
                Err(TokenError::WaitUntil(until)) => {
                    let wait = (until - now).to_std().unwrap_or(Duration::ZERO);
                    if wait > self.policy.max_token_wait {
                        return Err(format!("all tokens rate limited until {until}"));
                    }
                    self.clock.sleep(wait);
                }
            }
        }
    }

    fn classify(&self, pr_key: &str, repo: &str, token_index: usize, attempt: u32, resp: HttpResponse) -> Step {
        match resp.status {
            200 => match parse_body(pr_key, repo, &resp.body) {
                BodyVerdict::Parsed(payload) => Step::Done(FetchCode::Ok, None, Some(payload)),
                BodyVerdict::RateLimited => {
                    self.cool_down(token_index, attempt, &resp);
                    Step::Retry(FetchCode::RateLimited, Some("GraphQL RATE_LIMITED".to_string()))
                }
                BodyVerdict::NotFound(msg) => Step::Done(FetchCode::NotFound, Some(msg), None),
                BodyVerdict::Malformed(msg) => Step::Done(FetchCode::ServerError, Some(msg), None),
            },
            401 => Step::Done(FetchCode::AuthFailed, Some("credentials rejected".to_string()), None),
            403 | 429 => {
                self.cool_down(token_index, attempt, &resp);
                Step::Retry(FetchCode::RateLimited, None)
            }
            404 => Step::Done(FetchCode::NotFound, None, None),
            410 => Step::Done(FetchCode::Gone, None, None),
            451 => Step::Done(FetchCode::LegalBlock, None, None),
            500..=599 => Step::Retry(FetchCode::ExhaustedRetries, Some(format!("server error {}", resp.status))),
            other => Step::Done(FetchCode::ServerError, Some(format!("unexpected HTTP status {other}")), None),
        }
    }

    fn cool_down(&self, token_index: usize, attempt: u32, resp: &HttpResponse) {
        let now = self.clock.now();
        let until = resp
            .rate_limit_reset
            .and_then(|secs| Utc.timestamp_opt(secs, 0).single())
            .or_else(|| resp.retry_after.map(|s| now + chrono::Duration::seconds(s as i64)))
            .unwrap_or_else(|| {
                let delay = backoff_delay(attempt, &self.policy).unwrap_or(self.policy.max_delay);
                now + chrono::Duration::from_std(delay).unwrap_or_default()
            });
        self.pool.mark_rate_limited(token_index, until);
    }

    fn finish(
        &self,
        pr_key: &str,
        code: FetchCode,
        http_status: Option<u16>,
        attempts: Vec<AttemptRecord>,
        message: Option<String>,
        payload: Option<Box<(PrMetadata, RepositoryRecord)>>,
    ) -> FetchOutcome {
        let (metadata, repository) = match payload {
            Some(p) => {
                let (m, r) = *p;
                (Some(m), Some(r))
            }
            None => (None, None),
        };
        FetchOutcome {
            pr_key: pr_key.to_string(),
            status: FetchStatus { code, http_status, attempts: attempts.len().max(1) as u32 },
            metadata,
            repository,
            attempts,
            message,
        }
    }
}
