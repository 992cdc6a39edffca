//! Loading PR records from corpus exports and selecting merge candidates.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed repository name {0:?}: expected owner/repository")]
    MalformedRepoName(String),
    #[error("pull request number must be positive, got {0}")]
    NonPositiveNumber(i64),
    #[error("cannot read corpus {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: {message}")]
    UnparseableRow { row: usize, message: String },
    #[error("unknown corpus format {0:?} (expected csv or jsonl)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrState {
    Open,
    Closed,
    Merged,
    Unknown,
}

impl PrState {
    pub fn parse_lenient(raw: &str) -> PrState {
        match raw.trim().to_ascii_lowercase().as_str() {
            "open" => PrState::Open,
            "closed" => PrState::Closed,
            "merged" => PrState::Merged,
            _ => PrState::Unknown,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PrState::Open => "open",
            PrState::Closed => "closed",
            PrState::Merged => "merged",
            PrState::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Csv,
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(CorpusFormat::Csv),
            "jsonl" | "ndjson" => Ok(CorpusFormat::Jsonl),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PullRequestRecord {
    pub repo_full_name: String,
    pub pr_number: u64,
    pub pr_key: String,
    pub agent: String,
    pub state: PrState,
    pub created_at: Option<DateTime<Utc>>,
    pub closed_at: Option<DateTime<Utc>>,
    pub merged_at: Option<DateTime<Utc>>,
    pub additions: u64,
    pub deletions: u64,
}

impl PullRequestRecord {
    pub fn churn(&self) -> u64 {
        self.additions + self.deletions
    }

    /// State and timestamps disagree (open with a close time, closed without one).
    pub fn is_inconsistent(&self) -> bool {
        match self.state {
            PrState::Open => self.closed_at.is_some(),
            PrState::Closed => self.closed_at.is_none(),
            _ => false,
        }
    }
}

pub fn validate_repo_name(repo_full_name: &str) -> Result<(), IngestError> {
    let malformed = || IngestError::MalformedRepoName(repo_full_name.to_string());
    let (owner, name) = repo_full_name.split_once('/').ok_or_else(malformed)?;
    if owner.is_empty()
        || name.is_empty()
        || name.contains('/')
        || repo_full_name.contains('#')
        || repo_full_name.chars().any(char::is_whitespace)
    {
        return Err(malformed());
    }
    Ok(())
}

pub fn make_pr_key(repo_full_name: &str, pr_number: i64) -> Result<String, IngestError> {
    validate_repo_name(repo_full_name)?;
    if pr_number < 1 {
        return Err(IngestError::NonPositiveNumber(pr_number));
    }
    Ok(format!("{repo_full_name}#{pr_number}"))
}

/// Inverse of [`make_pr_key`]: splits at the final `#`.
pub fn split_pr_key(pr_key: &str) -> Option<(&str, u64)> {
    let (repo, number) = pr_key.rsplit_once('#')?;
    validate_repo_name(repo).ok()?;
    let number: u64 = number.parse().ok()?;
    (number >= 1).then_some((repo, number))
}

/// A row that could not become a record. Reported, never silently dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowIssue {
    /// 1-based data row index (header excluded).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub records: Vec<PullRequestRecord>,
    pub issues: Vec<RowIssue>,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<LoadedCorpus, IngestError> {
    let unreadable = |source| IngestError::Unreadable { path: path.display().to_string(), source };
    let file = File::open(path).map_err(unreadable)?;
    match format {
        CorpusFormat::Csv => load_csv(file),
        CorpusFormat::Jsonl => load_jsonl(BufReader::new(file), path),
    }
}

fn load_csv<R: std::io::Read>(reader: R) -> Result<LoadedCorpus, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::UnparseableRow { row: 0, message: e.to_string() })?
        .clone();
    for required in ["repo_full_name", "pr_number"] {
        if !headers.iter().any(|h| h.trim() == required) {
            return Err(IngestError::UnparseableRow {
                row: 0,
                message: format!("header lacks required column {required}"),
            });
        }
    }
    let mut out = LoadedCorpus::default();
    for (i, row) in rdr.records().enumerate() {
        let row_index = i + 1;
        let row = row.map_err(|e| IngestError::UnparseableRow { row: row_index, message: e.to_string() })?;
        let get = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .and_then(|pos| row.get(pos))
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(str::to_string)
        };
        push_row(&mut out, row_index, get);
    }
    Ok(out)
}

fn load_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<LoadedCorpus, IngestError> {
    let mut out = LoadedCorpus::default();
    let mut row_index = 0;
    for line in reader.lines() {
        let line = line.map_err(|source| IngestError::Unreadable { path: path.display().to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        row_index += 1;
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| IngestError::UnparseableRow { row: row_index, message: e.to_string() })?;
        let obj = value.as_object().ok_or_else(|| IngestError::UnparseableRow {
            row: row_index,
            message: "expected a JSON object".to_string(),
        })?;
        let get = |name: &str| match obj.get(name) {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => Some(s.trim().to_string()).filter(|s| !s.is_empty()),
            Some(other) => Some(other.to_string()),
        };
        push_row(&mut out, row_index, get);
    }
    Ok(out)
}

fn push_row(out: &mut LoadedCorpus, row: usize, get: impl Fn(&str) -> Option<String>) {
    match record_from_fields(get) {
        Ok(record) => out.records.push(record),
        Err(reason) => out.issues.push(RowIssue { row, reason }),
    }
}

fn parse_timestamp(field: &str, raw: Option<String>) -> Result<Option<DateTime<Utc>>, String> {
    raw.map(|v| {
        DateTime::parse_from_rfc3339(&v)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| format!("{field}: invalid timestamp {v:?}: {e}"))
    })
    .transpose()
}

fn parse_counter(field: &str, raw: Option<String>) -> Result<u64, String> {
    match raw {
        None => Ok(0),
        Some(v) => v
            .parse::<f64>()
            .ok()
            .filter(|x| x.fract() == 0.0 && *x >= 0.0)
            .map(|x| x as u64)
            .ok_or_else(|| format!("{field}: expected a non-negative integer, got {v:?}")),
    }
}

fn record_from_fields(get: impl Fn(&str) -> Option<String>) -> Result<PullRequestRecord, String> {
    let repo_full_name = get("repo_full_name").ok_or("missing repo_full_name")?;
    let raw_number = get("pr_number").ok_or("missing pr_number")?;
    let pr_number: i64 = raw_number
        .parse()
        .map_err(|_| format!("pr_number: not an integer: {raw_number:?}"))?;
    let pr_key = make_pr_key(&repo_full_name, pr_number).map_err(|e| e.to_string())?;

    let created_at = parse_timestamp("created_at", get("created_at"))?;
    let closed_at = parse_timestamp("closed_at", get("closed_at"))?;
    let merged_at = parse_timestamp("merged_at", get("merged_at"))?;
    let mut state = get("state").map(|s| PrState::parse_lenient(&s)).unwrap_or(PrState::Unknown);
    if merged_at.is_some() {
        state = PrState::Merged;
    }

    Ok(PullRequestRecord {
        repo_full_name,
        pr_number: pr_number as u64,
        pr_key,
        agent: get("agent").unwrap_or_default(),
        state,
        created_at,
        closed_at,
        merged_at,
        additions: parse_counter("additions", get("additions"))?,
        deletions: parse_counter("deletions", get("deletions"))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    Merged,
    DuplicateKey,
}

impl ExclusionReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExclusionReason::Merged => "merged",
            ExclusionReason::DuplicateKey => "duplicate_key",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub record: PullRequestRecord,
    /// State unknown at ingest; metadata retrieval makes the final call.
    pub deferred: bool,
    pub inconsistent: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excluded {
    pub record: PullRequestRecord,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, Default)]
pub struct CandidateSplit {
    pub retained: Vec<Candidate>,
    pub excluded: Vec<Excluded>,
}

/// Keeps open and closed-unmerged PRs; unknown states are kept as deferred.
/// Repeated pr_keys after the first occurrence are excluded.
pub fn filter_candidates(records: Vec<PullRequestRecord>) -> CandidateSplit {
    let mut seen = HashSet::new();
    let mut split = CandidateSplit::default();
    for record in records {
        if !seen.insert(record.pr_key.clone()) {
            split.excluded.push(Excluded { record, reason: ExclusionReason::DuplicateKey });
            continue;
        }
        let merged = record.state == PrState::Merged || record.merged_at.is_some();
        if merged {
            split.excluded.push(Excluded { record, reason: ExclusionReason::Merged });
            continue;
        }
        let deferred = record.state == PrState::Unknown;
        let inconsistent = record.is_inconsistent();
        split.retained.push(Candidate { record, deferred, inconsistent });
    }
    split
}
