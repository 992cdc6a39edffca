//! Scripted-server scenarios for the metadata client. Each panics on the
//! first deviation from the expected request sequence.

use std::sync::Arc;
use std::time::Duration;

use mergescope_core::metadata::{
    render_response, FetchCode, HttpResponse, ManualClock, MetadataClient, MetadataState, RetryPolicy,
    ScriptedTransport, TokenPool, TransportError,
};

use super::github::{pr, repository, ts};

const BASE: &str = "1111111111111111111111111111111111111111";
const HEAD: &str = "2222222222222222222222222222222222222222";

fn ok_body(key: &str) -> String {
    render_response(&repository("octo/widgets"), &pr(key, MetadataState::Open, BASE, HEAD))
}

fn client(script: Vec<Result<HttpResponse, TransportError>>, tokens: &[&str]) -> (MetadataClient, Arc<ScriptedTransport>, Arc<ManualClock>) {
    let transport = Arc::new(ScriptedTransport::sequence(script));
    let clock = Arc::new(ManualClock::new(ts(super::EPOCH)));
    let pool = TokenPool::new(tokens.iter().copied()).unwrap();
    let client = MetadataClient::new(transport.clone(), clock.clone(), pool, RetryPolicy::default());
    (client, transport, clock)
}

/// 403 on token A, then success on token B after one backoff.
pub fn rate_limited_then_success() {
    let (client, transport, clock) =
        client(vec![Ok(HttpResponse::new(403, "")), Ok(HttpResponse::new(200, ok_body("octo/widgets#1")))], &["A", "B"]);
    let out = client.fetch_pr_metadata("octo/widgets#1").unwrap();
    assert_eq!(out.status.code, FetchCode::Ok);
    assert_eq!(out.status.attempts, 2);
    assert_eq!(out.status.http_status, Some(200));
    assert_eq!(transport.tokens_used(), ["A", "B"]);
    assert_eq!(clock.sleeps(), [Duration::from_secs(2)]);
    let meta = out.metadata.unwrap();
    assert_eq!((meta.base_ref_oid.as_str(), meta.head_ref_oid.as_str()), (BASE, HEAD));
    let vars = &transport.requests()[0].variables;
    assert_eq!((vars["owner"].as_str(), vars["name"].as_str(), vars["number"].as_u64()), (Some("octo"), Some("widgets"), Some(1)));
}

/// 404 is terminal after exactly one request.
pub fn not_found_is_terminal() {
    let (client, transport, clock) = client(vec![Ok(HttpResponse::new(404, ""))], &["A", "B"]);
    let out = client.fetch_pr_metadata("octo/widgets#2").unwrap();
    assert_eq!(out.status.code, FetchCode::NotFound);
    assert_eq!((out.status.attempts, out.status.http_status), (1, Some(404)));
    assert!(out.metadata.is_none());
    assert_eq!(transport.tokens_used(), ["A"]);
    assert!(clock.sleeps().is_empty());
}

/// Successive calls rotate A, B, A; a cooled token is skipped.
pub fn token_rotation() {
    let ok = |k: &str| Ok(HttpResponse::new(200, ok_body(k)));
    let mut limited = HttpResponse::new(403, "");
    limited.rate_limit_reset = Some(super::EPOCH + 3600);
    let (client, transport, _) = client(
        vec![ok("octo/widgets#1"), ok("octo/widgets#2"), ok("octo/widgets#3"), Ok(limited), ok("octo/widgets#4"), ok("octo/widgets#5")],
        &["A", "B"],
    );
    for n in 1..=3 {
        assert!(client.fetch_pr_metadata(&format!("octo/widgets#{n}")).unwrap().is_ok());
    }
    assert_eq!(transport.tokens_used(), ["A", "B", "A"]);
    // B is limited for an hour: the retry and the next call both go to A
    let out = client.fetch_pr_metadata("octo/widgets#4").unwrap();
    assert_eq!((out.status.code, out.status.attempts), (FetchCode::Ok, 2));
    assert!(client.fetch_pr_metadata("octo/widgets#5").unwrap().is_ok());
    assert_eq!(transport.tokens_used(), ["A", "B", "A", "B", "A", "A"]);
}

/// 502 then 200 succeeds on the second attempt.
pub fn server_error_then_success() {
    let (client, transport, clock) =
        client(vec![Ok(HttpResponse::new(502, "")), Ok(HttpResponse::new(200, ok_body("octo/widgets#1")))], &["A"]);
    let out = client.fetch_pr_metadata("octo/widgets#1").unwrap();
    assert_eq!((out.status.code, out.status.attempts), (FetchCode::Ok, 2));
    assert_eq!(transport.requests().len(), 2);
    assert_eq!(clock.sleeps(), [Duration::from_secs(2)]);
}

/// Persistent 5xx consumes the whole retry budget with growing delays.
pub fn server_errors_exhaust_retries() {
    let (client, transport, clock) = client((0..10).map(|_| Ok(HttpResponse::new(503, ""))).collect(), &["A"]);
    let out = client.fetch_pr_metadata("octo/widgets#1").unwrap();
    assert_eq!(out.status.code, FetchCode::ExhaustedRetries);
    assert_eq!((out.status.attempts, out.status.http_status), (5, Some(503)));
    assert_eq!(transport.requests().len(), 5);
    let secs: Vec<u64> = clock.sleeps().iter().map(Duration::as_secs).collect();
    assert_eq!(secs, [2, 4, 8, 16]);
}

/// 401 is terminal; 410 and 451 map to their own codes.
pub fn terminal_codes() {
    for (status, code) in [(401, FetchCode::AuthFailed), (410, FetchCode::Gone), (451, FetchCode::LegalBlock), (418, FetchCode::ServerError)] {
        let (client, transport, _) = client(vec![Ok(HttpResponse::new(status, ""))], &["A"]);
        let out = client.fetch_pr_metadata("octo/widgets#1").unwrap();
        assert_eq!((out.status.code, out.status.attempts), (code, 1), "HTTP {status}");
        assert_eq!(transport.requests().len(), 1);
    }
}

/// Transport failures retry, then surface as exhausted.
pub fn transport_failures() {
    let (client, _, _) = client((0..5).map(|_| Err(TransportError("connection reset".into()))).collect(), &["A"]);
    let out = client.fetch_pr_metadata("octo/widgets#1").unwrap();
    assert_eq!((out.status.code, out.status.attempts, out.status.http_status), (FetchCode::ExhaustedRetries, 5, None));
}
