//! Relational dataset emission (five CSV tables + manifest) and the run log.
//!
//! Column maps below are the single source of truth for both variants: the
//! raw variant writes every column, the clean variant only those marked
//! `clean`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attribution::ConflictFileCommit;
use crate::merge::OutcomeLabel;
use crate::metadata::RepositoryRecord;
use crate::parser::{ConflictFileRecord, ConflictRegion, ConflictType};
use crate::status::StatusCode;

pub const REPOSITORY_CSV: &str = "repository.csv";
pub const PULL_REQUEST_CSV: &str = "pull_request.csv";
pub const CONFLICT_FILE_CSV: &str = "conflict_file.csv";
pub const CONFLICT_REGION_CSV: &str = "conflict_region.csv";
pub const CONFLICT_FILE_COMMIT_CSV: &str = "conflict_file_commit.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Raw,
    Clean,
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Variant::Raw),
            "clean" => Ok(Variant::Clean),
            other => Err(format!("unknown variant {other:?} (expected raw or clean)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Column {
    pub name: &'static str,
    pub clean: bool,
}

const fn col(name: &'static str, clean: bool) -> Column {
    Column { name, clean }
}

pub const REPOSITORY_COLUMNS: &[Column] = &[
    col("repo_full_name", true),
    col("stars", true),
    col("forks", true),
    col("primary_language", true),
    col("is_archived", true),
    col("is_fork", true),
];

pub const PULL_REQUEST_COLUMNS: &[Column] = &[
    col("pr_key", true),
    col("repo_full_name", true),
    col("pr_number", true),
    col("agent", true),
    col("state", true),
    col("created_at", true),
    col("closed_at", true),
    col("merged_at", true),
    col("additions", true),
    col("deletions", true),
    col("base_ref_name", true),
    col("head_ref_name", true),
    col("base_ref_oid", true),
    col("head_ref_oid", true),
    col("simulated_base_oid", true),
    col("mergeable_signal", true),
    col("outcome", true),
    col("num_conflict_files", true),
    col("num_conflict_regions", true),
    col("conflict_lines", true),
    col("status_code", true),
    col("base_provenance", false),
    col("fetch_attempts", false),
    col("fetch_http_status", false),
    col("ingest_deferred", false),
    col("ingest_inconsistent", false),
    col("status_message", false),
];

pub const CONFLICT_FILE_COLUMNS: &[Column] = &[
    col("pr_key", true),
    col("file_path", true),
    col("num_regions", true),
    col("conflict_lines", true),
    col("file_extension", true),
    col("conflict_type", true),
    col("parse_note", false),
];

pub const CONFLICT_REGION_COLUMNS: &[Column] = &[
    col("pr_key", true),
    col("file_path", true),
    col("region_index", true),
    col("start_line", true),
    col("mid_line", true),
    col("end_line", true),
    col("ours_len", true),
    col("theirs_len", true),
    col("ours_hash", true),
    col("theirs_hash", true),
    col("ours_preview", true),
    col("theirs_preview", true),
    col("has_base_section", false),
];

pub const CONFLICT_FILE_COMMIT_COLUMNS: &[Column] = &[
    col("pr_key", true),
    col("file_path", true),
    col("head_last_touch_oid", true),
    col("base_last_touch_oid", true),
];

/// One row of `pull_request.csv`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PullRequestRow {
    pub pr_key: String,
    pub repo_full_name: String,
    pub pr_number: u64,
    pub agent: String,
    pub state: String,
    pub created_at: Option<DateTime<Utc>>,
    pub closed_at: Option<DateTime<Utc>>,
    pub merged_at: Option<DateTime<Utc>>,
    pub additions: Option<u64>,
    pub deletions: Option<u64>,
    pub base_ref_name: Option<String>,
    pub head_ref_name: Option<String>,
    pub base_ref_oid: Option<String>,
    pub head_ref_oid: Option<String>,
    pub simulated_base_oid: Option<String>,
    pub mergeable_signal: Option<String>,
    pub outcome: Option<OutcomeLabel>,
    pub num_conflict_files: usize,
    pub num_conflict_regions: usize,
    pub conflict_lines: usize,
    pub status_code: Option<StatusCode>,
    pub base_provenance: Option<String>,
    pub fetch_attempts: Option<u32>,
    pub fetch_http_status: Option<u16>,
    pub ingest_deferred: bool,
    pub ingest_inconsistent: bool,
    pub status_message: Option<String>,
}

impl PullRequestRow {
    pub fn churn(&self) -> Option<u64> {
        Some(self.additions? + self.deletions?)
    }
}

fn ts(t: &Option<DateTime<Utc>>) -> String {
    t.map(|t| t.to_rfc3339_opts(SecondsFormat::Secs, true)).unwrap_or_default()
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

trait TableRow {
    fn cells(&self) -> Vec<String>;
}

impl TableRow for RepositoryRecord {
    fn cells(&self) -> Vec<String> {
        vec![
            self.repo_full_name.clone(),
            self.stars.to_string(),
            self.forks.to_string(),
            opt(&self.primary_language),
            self.is_archived.to_string(),
            self.is_fork.to_string(),
        ]
    }
}

impl TableRow for PullRequestRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.pr_key.clone(),
            self.repo_full_name.clone(),
            self.pr_number.to_string(),
            self.agent.clone(),
            self.state.clone(),
            ts(&self.created_at),
            ts(&self.closed_at),
            ts(&self.merged_at),
            opt(&self.additions),
            opt(&self.deletions),
            opt(&self.base_ref_name),
            opt(&self.head_ref_name),
            opt(&self.base_ref_oid),
            opt(&self.head_ref_oid),
            opt(&self.simulated_base_oid),
            opt(&self.mergeable_signal),
            self.outcome.map(|o| o.as_str().to_string()).unwrap_or_default(),
            self.num_conflict_files.to_string(),
            self.num_conflict_regions.to_string(),
            self.conflict_lines.to_string(),
            opt(&self.status_code),
            opt(&self.base_provenance),
            opt(&self.fetch_attempts),
            opt(&self.fetch_http_status),
            self.ingest_deferred.to_string(),
            self.ingest_inconsistent.to_string(),
            opt(&self.status_message),
        ]
    }
}

impl TableRow for ConflictFileRecord {
    fn cells(&self) -> Vec<String> {
        vec![
            self.pr_key.clone(),
            self.file_path.clone(),
            self.num_regions.to_string(),
            self.conflict_lines.to_string(),
            self.file_extension.clone(),
            self.conflict_type.as_str().to_string(),
            opt(&self.parse_note),
        ]
    }
}

impl TableRow for ConflictRegion {
    fn cells(&self) -> Vec<String> {
        vec![
            self.pr_key.clone(),
            self.file_path.clone(),
            self.region_index.to_string(),
            self.start_line.to_string(),
            self.mid_line.to_string(),
            self.end_line.to_string(),
            self.ours_len.to_string(),
            self.theirs_len.to_string(),
            self.ours_hash.clone(),
            self.theirs_hash.clone(),
            self.ours_preview.join("\n"),
            self.theirs_preview.join("\n"),
            self.has_base_section.to_string(),
        ]
    }
}

impl TableRow for ConflictFileCommit {
    fn cells(&self) -> Vec<String> {
        vec![
            self.pr_key.clone(),
            self.file_path.clone(),
            opt(&self.head_last_touch_oid),
            opt(&self.base_last_touch_oid),
        ]
    }
}

/// All entity streams for one emission.
#[derive(Debug, Clone, Default)]
pub struct DatasetTables {
    pub repositories: Vec<RepositoryRecord>,
    pub pull_requests: Vec<PullRequestRow>,
    pub files: Vec<ConflictFileRecord>,
    pub regions: Vec<ConflictRegion>,
    pub commits: Vec<ConflictFileCommit>,
}

impl DatasetTables {
    /// Sorts every table by its primary key.
    pub fn sort(&mut self) {
        self.repositories.sort_by(|a, b| a.repo_full_name.cmp(&b.repo_full_name));
        self.pull_requests.sort_by(|a, b| a.pr_key.cmp(&b.pr_key));
        self.files.sort_by(|a, b| (&a.pr_key, &a.file_path).cmp(&(&b.pr_key, &b.file_path)));
        self.regions
            .sort_by(|a, b| (&a.pr_key, &a.file_path, a.region_index).cmp(&(&b.pr_key, &b.file_path, b.region_index)));
        self.commits.sort_by(|a, b| (&a.pr_key, &a.file_path).cmp(&(&b.pr_key, &b.file_path)));
    }
}

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("referential integrity violated: {table} row references unknown {key}")]
    DanglingKey { table: &'static str, key: String },
    #[error("duplicate primary key {key} in {table}")]
    DuplicateKey { table: &'static str, key: String },
    #[error("severity counters of {pr_key} disagree with its conflict rows: {detail}")]
    SeverityMismatch { pr_key: String, detail: String },
    #[error("I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

fn check_unique<'a>(table: &'static str, keys: impl Iterator<Item = String>) -> Result<HashSet<String>, EmitError> {
    let mut seen = HashSet::new();
    for key in keys {
        if !seen.insert(key.clone()) {
            return Err(EmitError::DuplicateKey { table, key });
        }
    }
    Ok(seen)
}

/// Referential integrity and severity-sum consistency across the tables.
pub fn check_integrity(tables: &DatasetTables) -> Result<(), EmitError> {
    check_unique("repository", tables.repositories.iter().map(|r| r.repo_full_name.clone()))?;
    let prs = check_unique("pull_request", tables.pull_requests.iter().map(|p| p.pr_key.clone()))?;
    let file_keys = check_unique(
        "conflict_file",
        tables.files.iter().map(|f| format!("{}\t{}", f.pr_key, f.file_path)),
    )?;
    check_unique(
        "conflict_region",
        tables.regions.iter().map(|r| format!("{}\t{}\t{}", r.pr_key, r.file_path, r.region_index)),
    )?;
    check_unique("conflict_file_commit", tables.commits.iter().map(|c| format!("{}\t{}", c.pr_key, c.file_path)))?;

    for f in &tables.files {
        if !prs.contains(&f.pr_key) {
            return Err(EmitError::DanglingKey { table: "conflict_file", key: f.pr_key.clone() });
        }
    }
    for r in &tables.regions {
        if !file_keys.contains(&format!("{}\t{}", r.pr_key, r.file_path)) {
            return Err(EmitError::DanglingKey { table: "conflict_region", key: format!("{}:{}", r.pr_key, r.file_path) });
        }
    }
    for c in &tables.commits {
        if !file_keys.contains(&format!("{}\t{}", c.pr_key, c.file_path)) {
            return Err(EmitError::DanglingKey { table: "conflict_file_commit", key: format!("{}:{}", c.pr_key, c.file_path) });
        }
    }

    #[derive(Default)]
    struct Sums {
        files: usize,
        file_regions: usize,
        file_lines: usize,
        regions: usize,
        region_lines: usize,
    }
    let mut sums: BTreeMap<&str, Sums> = BTreeMap::new();
    for f in &tables.files {
        let s = sums.entry(&f.pr_key).or_default();
        s.files += 1;
        s.file_regions += f.num_regions;
        s.file_lines += f.conflict_lines;
    }
    for r in &tables.regions {
        let s = sums.entry(&r.pr_key).or_default();
        s.regions += 1;
        s.region_lines += r.ours_len + r.theirs_len;
    }
    for pr in &tables.pull_requests {
        let empty = Sums::default();
        let s = sums.get(pr.pr_key.as_str()).unwrap_or(&empty);
        let mismatch = |detail: String| EmitError::SeverityMismatch { pr_key: pr.pr_key.clone(), detail };
        if pr.outcome == Some(OutcomeLabel::MergeConflict) && pr.num_conflict_files == 0 {
            return Err(mismatch("conflicting PR without conflicting files".into()));
        }
        if pr.outcome != Some(OutcomeLabel::MergeConflict)
            && (pr.num_conflict_files + pr.num_conflict_regions + pr.conflict_lines > 0 || s.files > 0)
        {
            return Err(mismatch("non-conflicting PR carries conflict data".into()));
        }
        if s.files != pr.num_conflict_files || s.regions != pr.num_conflict_regions || s.region_lines != pr.conflict_lines {
            return Err(mismatch(format!(
                "rows give files={} regions={} lines={}, counters give {}/{}/{}",
                s.files, s.regions, s.region_lines, pr.num_conflict_files, pr.num_conflict_regions, pr.conflict_lines
            )));
        }
        if s.file_regions != s.regions || s.file_lines != s.region_lines {
            return Err(mismatch("per-file totals disagree with region rows".into()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub variant: Variant,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn rows(&self, name: &str) -> Option<usize> {
        self.files.iter().find(|f| f.name == name).map(|f| f.rows)
    }
}

fn render_csv<R: TableRow>(columns: &[Column], rows: &[R], variant: Variant) -> Result<Vec<u8>, csv::Error> {
    let keep: Vec<bool> = columns.iter().map(|c| variant == Variant::Raw || c.clean).collect();
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(Vec::new());
    wtr.write_record(columns.iter().zip(&keep).filter(|(_, k)| **k).map(|(c, _)| c.name))?;
    for row in rows {
        let cells = row.cells();
        debug_assert_eq!(cells.len(), columns.len());
        wtr.write_record(cells.iter().zip(&keep).filter(|(_, k)| **k).map(|(c, _)| c.as_str()))?;
    }
    wtr.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

/// Writes the five tables and `manifest.json` into `out_dir`.
pub fn emit_tables(tables: &DatasetTables, out_dir: &Path, variant: Variant) -> Result<Manifest, EmitError> {
    check_integrity(tables)?;
    let mut sorted = tables.clone();
    sorted.sort();
    fs::create_dir_all(out_dir).map_err(|source| EmitError::Io { path: out_dir.to_path_buf(), source })?;

    let rendered = [
        (REPOSITORY_CSV, render_csv(REPOSITORY_COLUMNS, &sorted.repositories, variant), sorted.repositories.len()),
        (PULL_REQUEST_CSV, render_csv(PULL_REQUEST_COLUMNS, &sorted.pull_requests, variant), sorted.pull_requests.len()),
        (CONFLICT_FILE_CSV, render_csv(CONFLICT_FILE_COLUMNS, &sorted.files, variant), sorted.files.len()),
        (CONFLICT_REGION_CSV, render_csv(CONFLICT_REGION_COLUMNS, &sorted.regions, variant), sorted.regions.len()),
        (CONFLICT_FILE_COMMIT_CSV, render_csv(CONFLICT_FILE_COMMIT_COLUMNS, &sorted.commits, variant), sorted.commits.len()),
    ];
    let mut files = Vec::new();
    for (name, bytes, rows) in rendered {
        let path = out_dir.join(name);
        let bytes = bytes.map_err(|source| EmitError::Csv { path: path.clone(), source })?;
        fs::write(&path, &bytes).map_err(|source| EmitError::Io { path: path.clone(), source })?;
        files.push(ManifestEntry { name: name.to_string(), rows, sha256: hex::encode(Sha256::digest(&bytes)) });
    }
    let manifest = Manifest { variant, files };
    let path = out_dir.join(MANIFEST_JSON);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|source| EmitError::Io { path, source })?;
    Ok(manifest)
}

fn parse_cell<T: FromStr>(path: &Path, row: usize, column: &str, value: &str) -> Result<Option<T>, EmitError> {
    if value.is_empty() {
        return Ok(None);
    }
    value.parse().map(Some).map_err(|_| EmitError::Malformed {
        path: path.to_path_buf(),
        message: format!("row {row}: column {column}: cannot parse {value:?}"),
    })
}

fn parse_time(path: &Path, row: usize, column: &str, value: &str) -> Result<Option<DateTime<Utc>>, EmitError> {
    if value.is_empty() {
        return Ok(None);
    }
    DateTime::parse_from_rfc3339(value).map(|t| Some(t.with_timezone(&Utc))).map_err(|_| EmitError::Malformed {
        path: path.to_path_buf(),
        message: format!("row {row}: column {column}: bad timestamp {value:?}"),
    })
}

/// Reads `pull_request.csv` of either variant. Columns are located by
/// header name; absent columns take their defaults.
pub fn read_pull_requests(path: &Path) -> Result<Vec<PullRequestRow>, EmitError> {
    let csv_err = |source| EmitError::Csv { path: path.to_path_buf(), source };
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    for required in ["pr_key", "agent", "outcome"] {
        if !headers.iter().any(|h| h == required) {
            return Err(EmitError::Malformed { path: path.to_path_buf(), message: format!("missing column {required}") });
        }
    }
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row = i + 1;
        let get = |name: &str| headers.iter().position(|h| h == name).and_then(|p| record.get(p)).unwrap_or("");
        let opt_string = |name: &str| Some(get(name).to_string()).filter(|s| !s.is_empty());
        let outcome = match get("outcome") {
            "" => None,
            other => Some(OutcomeLabel::parse(other).ok_or_else(|| EmitError::Malformed {
                path: path.to_path_buf(),
                message: format!("row {row}: unknown outcome {other:?}"),
            })?),
        };
        rows.push(PullRequestRow {
            pr_key: get("pr_key").to_string(),
            repo_full_name: get("repo_full_name").to_string(),
            pr_number: parse_cell(path, row, "pr_number", get("pr_number"))?.unwrap_or(0),
            agent: get("agent").to_string(),
            state: get("state").to_string(),
            created_at: parse_time(path, row, "created_at", get("created_at"))?,
            closed_at: parse_time(path, row, "closed_at", get("closed_at"))?,
            merged_at: parse_time(path, row, "merged_at", get("merged_at"))?,
            additions: parse_cell(path, row, "additions", get("additions"))?,
            deletions: parse_cell(path, row, "deletions", get("deletions"))?,
            base_ref_name: opt_string("base_ref_name"),
            head_ref_name: opt_string("head_ref_name"),
            base_ref_oid: opt_string("base_ref_oid"),
            head_ref_oid: opt_string("head_ref_oid"),
            simulated_base_oid: opt_string("simulated_base_oid"),
            mergeable_signal: opt_string("mergeable_signal"),
            outcome,
            num_conflict_files: parse_cell(path, row, "num_conflict_files", get("num_conflict_files"))?.unwrap_or(0),
            num_conflict_regions: parse_cell(path, row, "num_conflict_regions", get("num_conflict_regions"))?.unwrap_or(0),
            conflict_lines: parse_cell(path, row, "conflict_lines", get("conflict_lines"))?.unwrap_or(0),
            status_code: StatusCode::parse(get("status_code")),
            base_provenance: opt_string("base_provenance"),
            fetch_attempts: parse_cell(path, row, "fetch_attempts", get("fetch_attempts"))?,
            fetch_http_status: parse_cell(path, row, "fetch_http_status", get("fetch_http_status"))?,
            ingest_deferred: get("ingest_deferred") == "true",
            ingest_inconsistent: get("ingest_inconsistent") == "true",
            status_message: opt_string("status_message"),
        });
    }
    Ok(rows)
}

/// Reads `conflict_file.csv` (used by integrity checks in tooling).
pub fn read_conflict_files(path: &Path) -> Result<Vec<ConflictFileRecord>, EmitError> {
    let csv_err = |source| EmitError::Csv { path: path.to_path_buf(), source };
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let get = |name: &str| headers.iter().position(|h| h == name).and_then(|p| record.get(p)).unwrap_or("");
        let conflict_type: ConflictType = serde_json::from_value(serde_json::Value::String(get("conflict_type").into()))
            .map_err(|_| EmitError::Malformed { path: path.to_path_buf(), message: format!("row {}: bad conflict_type", i + 1) })?;
        out.push(ConflictFileRecord {
            pr_key: get("pr_key").into(),
            file_path: get("file_path").into(),
            num_regions: parse_cell(path, i + 1, "num_regions", get("num_regions"))?.unwrap_or(0),
            conflict_lines: parse_cell(path, i + 1, "conflict_lines", get("conflict_lines"))?.unwrap_or(0),
            file_extension: get("file_extension").into(),
            conflict_type,
            parse_note: Some(get("parse_note").to_string()).filter(|s| !s.is_empty()),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ingest,
    Fetch,
    Prepare,
    Simulate,
    Extract,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub pr_key: String,
    pub phase: Phase,
    pub status_code: StatusCode,
    /// The PR's final entry; exactly one per PR.
    pub terminal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempts: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_status: Option<u16>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub commands: Vec<String>,
}

impl RunLogEntry {
    pub fn new(pr_key: &str, phase: Phase, status_code: StatusCode, terminal: bool) -> Self {
        RunLogEntry {
            pr_key: pr_key.to_string(),
            phase,
            status_code,
            terminal,
            message: None,
            timestamp: Utc::now(),
            attempts: None,
            http_status: None,
            commands: Vec::new(),
        }
    }

    pub fn message(mut self, message: impl Into<String>) -> Self {
        self.message = Some(message.into());
        self
    }
}

/// Appends one JSON line and flushes it to disk before returning.
pub fn append_run_log(entry: &RunLogEntry, log_path: &Path) -> std::io::Result<()> {
    RunLog::open(log_path)?.append(entry)
}

/// Opens a JSONL file for appending. A torn final line left by a crash is
/// cut off first, so the next record starts on a line of its own.
pub fn open_jsonl_append(path: &Path) -> std::io::Result<File> {
    let mut file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
    let len = file.metadata()?.len();
    let mut end = len;
    let mut buf = vec![0u8; 64 * 1024];
    while end > 0 {
        let start = end.saturating_sub(buf.len() as u64);
        let chunk = &mut buf[..(end - start) as usize];
        file.seek(SeekFrom::Start(start))?;
        file.read_exact(chunk)?;
        if let Some(pos) = chunk.iter().rposition(|&b| b == b'\n') {
            end = start + pos as u64 + 1;
            break;
        }
        end = start;
    }
    if end != len {
        tracing::warn!(path = %path.display(), bytes = len - end, "truncating torn final line");
        file.set_len(end)?;
    }
    Ok(file)
}

/// Append-only JSONL run log shared by one writer.
#[derive(Debug)]
pub struct RunLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl RunLog {
    pub fn open(path: &Path) -> std::io::Result<RunLog> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let file = open_jsonl_append(path)?;
        Ok(RunLog { path: path.to_path_buf(), file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &RunLogEntry) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(entry).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let mut file = self.file.lock().unwrap();
        file.write_all(&line)?;
        file.flush()?;
        file.sync_data()
    }
}

/// Reads a run log. A torn final line (crash mid-write) is ignored; any
/// other malformed line is an error.
pub fn read_run_log(path: &Path) -> Result<Vec<RunLogEntry>, EmitError> {
    let io = |source| EmitError::Io { path: path.to_path_buf(), source };
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io(e)),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>().map_err(io)?;
    let mut entries = Vec::with_capacity(lines.len());
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(entry) => entries.push(entry),
            Err(_) if i == last => tracing::warn!(path = %path.display(), "ignoring torn final run-log line"),
            Err(e) => {
                return Err(EmitError::Malformed { path: path.to_path_buf(), message: format!("line {}: {e}", i + 1) })
            }
        }
    }
    Ok(entries)
}

/// Terminal status per pr_key.
pub fn terminal_statuses(entries: &[RunLogEntry]) -> BTreeMap<String, StatusCode> {
    entries.iter().filter(|e| e.terminal).map(|e| (e.pr_key.clone(), e.status_code)).collect()
}

pub fn distinct_keys(entries: &[RunLogEntry]) -> BTreeSet<String> {
    entries.iter().map(|e| e.pr_key.clone()).collect()
}
