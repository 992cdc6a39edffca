use serde::{Deserialize, Serialize};

/// Status codes written to the run log and the `status_code` column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StatusCode {
    // ingest
    Retained,
    ExcludedMerged,
    ExcludedDuplicate,
    InvalidRecord,
    // fetch
    Ok,
    RateLimited,
    NotFound,
    Gone,
    LegalBlock,
    ServerError,
    AuthFailed,
    ExhaustedRetries,
    // prepare / simulate / extract
    RepoUnavailable,
    CommitUnreachable,
    MergeToolFailure,
    MergeClean,
    MergeConflict,
    ParseWarning,
}

impl StatusCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            StatusCode::Retained => "RETAINED",
            StatusCode::ExcludedMerged => "EXCLUDED_MERGED",
            StatusCode::ExcludedDuplicate => "EXCLUDED_DUPLICATE",
            StatusCode::InvalidRecord => "INVALID_RECORD",
            StatusCode::Ok => "OK",
            StatusCode::RateLimited => "RATE_LIMITED",
            StatusCode::NotFound => "NOT_FOUND",
            StatusCode::Gone => "GONE",
            StatusCode::LegalBlock => "LEGAL_BLOCK",
            StatusCode::ServerError => "SERVER_ERROR",
            StatusCode::AuthFailed => "AUTH_FAILED",
            StatusCode::ExhaustedRetries => "EXHAUSTED_RETRIES",
            StatusCode::RepoUnavailable => "REPO_UNAVAILABLE",
            StatusCode::CommitUnreachable => "COMMIT_UNREACHABLE",
            StatusCode::MergeToolFailure => "MERGE_TOOL_FAILURE",
            StatusCode::MergeClean => "MERGE_CLEAN",
            StatusCode::MergeConflict => "MERGE_CONFLICT",
            StatusCode::ParseWarning => "PARSE_WARNING",
        }
    }

    pub fn parse(s: &str) -> Option<StatusCode> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }
}

impl std::fmt::Display for StatusCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
