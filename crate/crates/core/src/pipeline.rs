//! Stage orchestration: ingest → fetch → simulate (prepare, merge, extract)
//! → emit, plus the analyze stage. Stages communicate only through files in
//! the output directory:
//!
//! | file               | written by | content                               |
//! |--------------------|------------|---------------------------------------|
//! | `candidates.jsonl` | ingest     | retained PR records with ingest flags |
//! | `metadata.jsonl`   | fetch      | one `FetchOutcome` per fetched PR     |
//! | `results.jsonl`    | simulate   | one `PrBundle` per simulated PR       |
//! | `run_log.jsonl`    | all stages | status-coded entries                  |
//!
//! A PR whose terminal entry is already in the run log is never processed
//! again, which is what makes interrupted runs resumable.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{churn_deciles, dataset_summary, pct2, per_agent_stats, severity_summary};
use crate::attribution::{attribute_files, ConflictFileCommit};
use crate::corpus::{filter_candidates, load_corpus, Candidate, CorpusFormat, ExclusionReason, IngestError};
use crate::dataset::{
    emit_tables, open_jsonl_append, read_pull_requests, read_run_log, terminal_statuses, DatasetTables, EmitError, Manifest, Phase,
    PullRequestRow, RunLog, RunLogEntry, Variant, PULL_REQUEST_CSV,
};
use crate::git::{Git, GitError, Transcript};
use crate::merge::{BaseProvenance, MergeError, MergeErrorCode, MergeOutcome, MergeSimulator};
use crate::metadata::{
    Clock, FetchOutcome, MetadataClient, MetadataState, RepositoryRecord, RetryPolicy, TokenPool, Transport,
};
use crate::parser::{ConflictFileRecord, ConflictRegion, DEFAULT_PREVIEW_LINES};
use crate::repo::{RepoCache, RepoError, RepoHandle};
use crate::status::StatusCode;

pub const CANDIDATES_JSONL: &str = "candidates.jsonl";
pub const INGEST_REPORT_JSON: &str = "ingest_report.json";
pub const METADATA_JSONL: &str = "metadata.jsonl";
pub const RESULTS_JSONL: &str = "results.jsonl";
pub const RUN_LOG_JSONL: &str = "run_log.jsonl";
pub const AGENT_RATES_CSV: &str = "agent_rates.csv";
pub const SEVERITY_SUMMARY_CSV: &str = "severity_summary.csv";
pub const SEVERITY_HIST_CSV: &str = "severity_hist.csv";
pub const CHURN_DECILES_CSV: &str = "churn_deciles.csv";
pub const SUMMARY_JSON: &str = "summary.json";

const STAGE_FILES: &[&str] = &[CANDIDATES_JSONL, INGEST_REPORT_JSON, METADATA_JSONL, RESULTS_JSONL, RUN_LOG_JSONL];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input {path}: run the `{stage}` stage first")]
    MissingInput { path: PathBuf, stage: &'static str },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Emit(#[from] EmitError),
    #[error(transparent)]
    Git(#[from] GitError),
    #[error("I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub corpus_path: Option<PathBuf>,
    pub format: CorpusFormat,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
    pub tokens: Vec<String>,
    /// Requests per token per hour; unlimited when absent.
    pub hourly_budget: Option<u32>,
    pub worker_count: usize,
    pub retry_policy: RetryPolicy,
    pub preview_lines: usize,
    pub variant: Variant,
    pub resume: bool,
    pub offline: bool,
    pub api_url: String,
    pub remote_base: String,
}

impl PipelineConfig {
    pub fn new(out_dir: impl Into<PathBuf>, cache_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            corpus_path: None,
            format: CorpusFormat::Csv,
            cache_dir: cache_dir.into(),
            out_dir: out_dir.into(),
            tokens: Vec::new(),
            hourly_budget: None,
            worker_count: default_worker_count(),
            retry_policy: RetryPolicy::default(),
            preview_lines: DEFAULT_PREVIEW_LINES,
            variant: Variant::Clean,
            resume: false,
            offline: false,
            api_url: crate::metadata::DEFAULT_ENDPOINT.to_string(),
            remote_base: "https://github.com/".to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.worker_count == 0 {
            return Err(PipelineError::Config("worker count must be at least 1".into()));
        }
        if self.preview_lines == 0 {
            return Err(PipelineError::Config("preview lines must be at least 1".into()));
        }
        if self.retry_policy.max_attempts == 0 {
            return Err(PipelineError::Config("retry attempts must be at least 1".into()));
        }
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn repo_cache(&self, git: Git) -> RepoCache {
        RepoCache::new(&self.cache_dir, git).offline(self.offline).remote_base(self.remote_base.clone())
    }
}

/// Logical processors, capped at 8.
pub fn default_worker_count() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).clamp(1, 8)
}

/// Everything the simulate stage produced for one PR.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrBundle {
    pub pr_key: String,
    pub outcome: MergeOutcome,
    pub base_provenance: Option<BaseProvenance>,
    pub files: Vec<ConflictFileRecord>,
    pub regions: Vec<ConflictRegion>,
    pub commits: Vec<ConflictFileCommit>,
}

// JSONL helpers

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>().map_err(io_err(path))?;
    let last = lines.len().saturating_sub(1);
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            // torn final line from an interrupted run
            Err(_) if i == last => {}
            Err(e) => {
                return Err(PipelineError::Malformed { path: path.to_path_buf(), line: i + 1, message: e.to_string() })
            }
        }
    }
    Ok(out)
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingInput { path, stage })
    }
}

struct JsonlAppender {
    path: PathBuf,
    file: File,
}

impl JsonlAppender {
    fn open(path: PathBuf) -> Result<Self, PipelineError> {
        let file = open_jsonl_append(&path).map_err(io_err(&path))?;
        Ok(JsonlAppender { path, file })
    }

    fn append<T: Serialize>(&mut self, value: &T) -> Result<(), PipelineError> {
        let mut line = serde_json::to_vec(value).expect("stage records serialize");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))
    }
}

fn open_run_log(cfg: &PipelineConfig) -> Result<RunLog, PipelineError> {
    let path = cfg.path(RUN_LOG_JSONL);
    RunLog::open(&path).map_err(io_err(&path))
}

fn log(run_log: &RunLog, entry: &RunLogEntry) -> Result<(), PipelineError> {
    run_log.append(entry).map_err(io_err(run_log.path()))
}

fn terminal_keys(cfg: &PipelineConfig) -> Result<BTreeMap<String, StatusCode>, PipelineError> {
    Ok(terminal_statuses(&read_run_log(&cfg.path(RUN_LOG_JSONL))?))
}

/// Runs `work` over `items` on `workers` threads, handing each result to
/// `sink` on the calling thread in completion order.
fn run_pool<I, R, W, S>(items: Vec<I>, workers: usize, work: W, mut sink: S) -> Result<(), PipelineError>
where
    I: Send,
    R: Send,
    W: Fn(I, &mpsc::Sender<R>) + Sync,
    S: FnMut(R) -> Result<(), PipelineError>,
{
    let queue = Mutex::new(VecDeque::from(items));
    let (tx, rx) = mpsc::channel::<R>();
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1) {
            let tx = tx.clone();
            let queue = &queue;
            let work = &work;
            scope.spawn(move || loop {
                let next = queue.lock().unwrap().pop_front();
                match next {
                    Some(item) => work(item, &tx),
                    None => break,
                }
            });
        }
        drop(tx);
        let mut first_err = None;
        for result in rx {
            if first_err.is_none() {
                if let Err(e) = sink(result) {
                    // stop handing out work; in-flight items finish
                    queue.lock().unwrap().clear();
                    first_err = Some(e);
                }
            }
        }
        first_err.map_or(Ok(()), Err)
    })
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub rows: usize,
    pub retained: usize,
    pub deferred: usize,
    pub inconsistent: usize,
    pub excluded_merged: usize,
    pub excluded_duplicate: usize,
    pub invalid_rows: usize,
}

#[derive(Serialize)]
struct IngestReport<'a> {
    summary: &'a IngestSummary,
    issues: &'a [crate::corpus::RowIssue],
    excluded: Vec<(&'a str, &'static str)>,
}

/// Loads and filters the corpus. Without `resume` the output directory's
/// stage files are reset first.
pub fn run_ingest(cfg: &PipelineConfig) -> Result<IngestSummary, PipelineError> {
    cfg.validate()?;
    let corpus = cfg.corpus_path.as_ref().ok_or_else(|| PipelineError::Config("no corpus path given".into()))?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    if !cfg.resume {
        for name in STAGE_FILES {
            let path = cfg.path(name);
            if path.exists() {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
    }
    let loaded = load_corpus(corpus, cfg.format)?;
    let rows = loaded.records.len() + loaded.issues.len();
    let split = filter_candidates(loaded.records);

    let summary = IngestSummary {
        rows,
        retained: split.retained.len(),
        deferred: split.retained.iter().filter(|c| c.deferred).count(),
        inconsistent: split.retained.iter().filter(|c| c.inconsistent).count(),
        excluded_merged: split.excluded.iter().filter(|e| e.reason == ExclusionReason::Merged).count(),
        excluded_duplicate: split.excluded.iter().filter(|e| e.reason == ExclusionReason::DuplicateKey).count(),
        invalid_rows: loaded.issues.len(),
    };

    let candidates_path = cfg.path(CANDIDATES_JSONL);
    let mut text = String::new();
    for c in &split.retained {
        text.push_str(&serde_json::to_string(c).expect("candidate serializes"));
        text.push('\n');
    }
    fs::write(&candidates_path, text).map_err(io_err(&candidates_path))?;

    let report = IngestReport {
        summary: &summary,
        issues: &loaded.issues,
        excluded: split.excluded.iter().map(|e| (e.record.pr_key.as_str(), e.reason.as_str())).collect(),
    };
    let report_path = cfg.path(INGEST_REPORT_JSON);
    fs::write(&report_path, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(io_err(&report_path))?;

    let run_log = open_run_log(cfg)?;
    let seen: BTreeSet<String> = read_run_log(run_log.path())?.into_iter().map(|e| e.pr_key).collect();
    for issue in &loaded.issues {
        let key = format!("row:{}", issue.row);
        if !seen.contains(&key) {
            log(&run_log, &RunLogEntry::new(&key, Phase::Ingest, StatusCode::InvalidRecord, true).message(&issue.reason))?;
        }
    }
    for e in &split.excluded {
        let key = &e.record.pr_key;
        match e.reason {
            ExclusionReason::Merged if !seen.contains(key) => {
                log(&run_log, &RunLogEntry::new(key, Phase::Ingest, StatusCode::ExcludedMerged, true))?;
            }
            // the first occurrence owns the terminal entry
            ExclusionReason::DuplicateKey if !seen.contains(key) => {
                log(&run_log, &RunLogEntry::new(key, Phase::Ingest, StatusCode::ExcludedDuplicate, false))?;
            }
            _ => {}
        }
    }
    for c in &split.retained {
        if seen.contains(&c.record.pr_key) {
            continue;
        }
        let mut entry = RunLogEntry::new(&c.record.pr_key, Phase::Ingest, StatusCode::Retained, false);
        let flags: Vec<&str> =
            [(c.deferred, "deferred"), (c.inconsistent, "inconsistent_state")].iter().filter(|f| f.0).map(|f| f.1).collect();
        if !flags.is_empty() {
            entry = entry.message(flags.join(","));
        }
        log(&run_log, &entry)?;
    }
    Ok(summary)
}

fn read_candidates(cfg: &PipelineConfig) -> Result<Vec<Candidate>, PipelineError> {
    read_jsonl(&require(cfg.path(CANDIDATES_JSONL), "ingest")?)
}

/// Latest fetch outcome per pr_key.
fn read_metadata(cfg: &PipelineConfig) -> Result<HashMap<String, FetchOutcome>, PipelineError> {
    let outcomes: Vec<FetchOutcome> = read_jsonl(&cfg.path(METADATA_JSONL))?;
    Ok(outcomes.into_iter().map(|o| (o.pr_key.clone(), o)).collect())
}

// ----------------------------------------------------------------- fetch

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    /// PRs handled in this invocation.
    pub processed: usize,
    /// PRs skipped because earlier runs finished them.
    pub skipped: usize,
    pub statuses: BTreeMap<StatusCode, usize>,
}

impl StageSummary {
    fn count(&mut self, code: StatusCode) {
        *self.statuses.entry(code).or_default() += 1;
    }

    pub fn failures(&self) -> usize {
        self.statuses
            .iter()
            .filter(|(c, _)| !matches!(c, StatusCode::Ok | StatusCode::MergeClean | StatusCode::MergeConflict))
            .map(|(_, n)| n)
            .sum()
    }
}

pub fn metadata_client(cfg: &PipelineConfig, transport: Arc<dyn Transport>, clock: Arc<dyn Clock>) -> Result<MetadataClient, PipelineError> {
    let mut pool = TokenPool::new(cfg.tokens.clone())
        .map_err(|_| PipelineError::Config("no GitHub tokens configured (GITHUB_TOKENS or --tokens-file)".into()))?;
    if let Some(budget) = cfg.hourly_budget {
        pool = pool.with_hourly_budget(budget);
    }
    Ok(MetadataClient::new(transport, clock, pool, cfg.retry_policy.clone()).with_endpoint(cfg.api_url.clone()))
}

/// Retrieves metadata for every candidate not yet fetched or finished.
pub fn run_fetch(cfg: &PipelineConfig, client: &MetadataClient) -> Result<StageSummary, PipelineError> {
    cfg.validate()?;
    let candidates = read_candidates(cfg)?;
    let terminal = terminal_keys(cfg)?;
    let fetched = read_metadata(cfg)?;
    let mut summary = StageSummary::default();

    let todo: Vec<Candidate> = candidates
        .into_iter()
        .filter(|c| {
            let key = &c.record.pr_key;
            let done = terminal.contains_key(key) || fetched.get(key).is_some_and(FetchOutcome::is_ok);
            if done {
                summary.skipped += 1;
            }
            !done
        })
        .collect();
    let mut appender = JsonlAppender::open(cfg.path(METADATA_JSONL))?;
    if todo.is_empty() {
        return Ok(summary);
    }
    let run_log = open_run_log(cfg)?;
    run_pool(
        todo,
        cfg.worker_count,
        |candidate: Candidate, tx: &mpsc::Sender<FetchOutcome>| {
            let outcome = client
                .fetch_pr_metadata(&candidate.record.pr_key)
                .expect("candidate keys are validated at ingest");
            let _ = tx.send(outcome);
        },
        |outcome| {
            appender.append(&outcome)?;
            let code = outcome.status.code.status_code();
            let mut entry = RunLogEntry::new(&outcome.pr_key, Phase::Fetch, code, !outcome.is_ok());
            entry.attempts = Some(outcome.status.attempts);
            entry.http_status = outcome.status.http_status;
            entry.message = outcome.message.clone();
            log(&run_log, &entry)?;
            summary.processed += 1;
            summary.count(code);
            if let Some(meta) = &outcome.metadata {
                if meta.state == MetadataState::Merged {
                    log(&run_log, &RunLogEntry::new(&outcome.pr_key, Phase::Fetch, StatusCode::ExcludedMerged, true))?;
                    summary.count(StatusCode::ExcludedMerged);
                }
            }
            Ok(())
        },
    )?;
    Ok(summary)
}

// -------------------------------------------------------------- simulate

struct SimTask {
    candidate: Candidate,
    fetch: FetchOutcome,
}

struct RepoGroup {
    repo_full_name: String,
    tasks: Vec<SimTask>,
}

struct SimMessage {
    bundle: PrBundle,
    phase: Phase,
    commands: Vec<String>,
    notes: Vec<RunLogEntry>,
}

fn error_bundle(pr_key: &str, base: &str, head: &str, code: MergeErrorCode, message: String) -> PrBundle {
    PrBundle {
        pr_key: pr_key.to_string(),
        outcome: MergeOutcome::error(pr_key, base, head, code, message),
        base_provenance: None,
        files: Vec::new(),
        regions: Vec::new(),
        commits: Vec::new(),
    }
}

fn repo_error_code(e: &RepoError) -> MergeErrorCode {
    match e {
        RepoError::CommitUnreachable { .. } => MergeErrorCode::CommitUnreachable,
        RepoError::Git(_) => MergeErrorCode::MergeToolFailure,
        _ => MergeErrorCode::RepoUnavailable,
    }
}

fn simulate_one(cache: &RepoCache, handle: &RepoHandle, task: &SimTask, preview_lines: usize) -> (PrBundle, Phase, Vec<RunLogEntry>, bool) {
    let key = task.candidate.record.pr_key.as_str();
    let meta = task.fetch.metadata.as_ref().expect("only OK fetches are simulated");
    let sim = MergeSimulator::new(cache, preview_lines);
    let (base_ref, head) = (meta.base_ref_oid.as_str(), meta.head_ref_oid.as_str());

    let resolved = match sim.resolve_merge_base(meta, handle) {
        Ok(r) => r,
        Err(MergeError::CommitUnreachable { oid }) => {
            let b = error_bundle(key, base_ref, head, MergeErrorCode::CommitUnreachable, format!("base {oid} is unreachable"));
            return (b, Phase::Prepare, Vec::new(), false);
        }
        Err(e) => {
            let b = error_bundle(key, base_ref, head, MergeErrorCode::MergeToolFailure, e.to_string());
            return (b, Phase::Prepare, Vec::new(), false);
        }
    };
    if let Err(e) = cache.prepare_worktree(handle, &resolved.oid) {
        let corrupt = matches!(e, RepoError::CorruptCache { .. });
        let mut b = error_bundle(key, &resolved.oid, head, repo_error_code(&e), e.to_string());
        b.base_provenance = Some(resolved.provenance);
        return (b, Phase::Prepare, Vec::new(), corrupt);
    }
    let pull_ref = format!("+refs/pull/{}/head:refs/mergescope/pull/{}", task.candidate.record.pr_number, task.candidate.record.pr_number);
    let report = match sim.simulate_merge(handle, key, &resolved.oid, head, &[pull_ref]) {
        Ok(r) => r,
        Err(e) => {
            let mut b = error_bundle(key, &resolved.oid, head, MergeErrorCode::RepoUnavailable, e.to_string());
            b.base_provenance = Some(resolved.provenance);
            return (b, Phase::Simulate, Vec::new(), true);
        }
    };

    let mut notes = Vec::new();
    for f in report.files.iter().filter(|f| f.parse_note.is_some()) {
        let msg = format!("{}: {}", f.file_path, f.parse_note.as_deref().unwrap_or_default());
        notes.push(RunLogEntry::new(key, Phase::Extract, StatusCode::ParseWarning, false).message(msg));
    }
    let commits = if report.files.is_empty() {
        Vec::new()
    } else {
        match attribute_files(cache.git(), &handle.local_path, &resolved.oid, head, &report.files) {
            Ok(c) => c,
            Err(e) => {
                notes.push(RunLogEntry::new(key, Phase::Extract, StatusCode::ParseWarning, false).message(format!("attribution failed: {e}")));
                Vec::new()
            }
        }
    };
    let phase = if report.files.is_empty() { Phase::Simulate } else { Phase::Extract };
    let bundle = PrBundle {
        pr_key: key.to_string(),
        outcome: report.outcome,
        base_provenance: Some(resolved.provenance),
        files: report.files,
        regions: report.regions,
        commits,
    };
    (bundle, phase, notes, false)
}

fn simulate_group(cfg: &PipelineConfig, base_git: &Git, group: RepoGroup, tx: &mpsc::Sender<SimMessage>) {
    let transcript = Transcript::new();
    let cache = cfg.repo_cache(base_git.recording(transcript.clone()));
    let send_all_failed = |tasks: &[SimTask], code: MergeErrorCode, msg: &str, commands: Vec<String>| {
        for (i, t) in tasks.iter().enumerate() {
            let meta = t.fetch.metadata.as_ref().expect("OK fetch");
            let _ = tx.send(SimMessage {
                bundle: error_bundle(&t.candidate.record.pr_key, &meta.base_ref_oid, &meta.head_ref_oid, code, msg.to_string()),
                phase: Phase::Prepare,
                commands: if i == 0 { commands.clone() } else { Vec::new() },
                notes: Vec::new(),
            });
        }
    };

    let _lock = match cache.lock(&group.repo_full_name) {
        Ok(l) => l,
        Err(e) => return send_all_failed(&group.tasks, MergeErrorCode::RepoUnavailable, &e.to_string(), transcript.take()),
    };
    let mut handle = match cache.ensure_repo(&group.repo_full_name) {
        Ok(h) => h,
        Err(e) => return send_all_failed(&group.tasks, MergeErrorCode::RepoUnavailable, &e.to_string(), transcript.take()),
    };
    for task in &group.tasks {
        let (bundle, phase, notes, corrupt) = simulate_one(&cache, &handle, task, cfg.preview_lines);
        let _ = tx.send(SimMessage { bundle, phase, commands: transcript.take(), notes });
        if corrupt {
            // evict via the health check, or drop the clone outright
            let _ = fs::remove_dir_all(&handle.local_path);
            match cache.ensure_repo(&group.repo_full_name) {
                Ok(h) => handle = h,
                Err(e) => {
                    let rest: Vec<&SimTask> = group.tasks.iter().skip_while(|t| !std::ptr::eq(*t, task)).skip(1).collect();
                    for t in rest {
                        let meta = t.fetch.metadata.as_ref().expect("OK fetch");
                        let _ = tx.send(SimMessage {
                            bundle: error_bundle(&t.candidate.record.pr_key, &meta.base_ref_oid, &meta.head_ref_oid, MergeErrorCode::RepoUnavailable, e.to_string()),
                            phase: Phase::Prepare,
                            commands: transcript.take(),
                            notes: Vec::new(),
                        });
                    }
                    return;
                }
            }
        }
    }
}

/// Simulates every fetched, still-unfinished candidate, then emits the dataset.
pub fn run_simulate(cfg: &PipelineConfig, git: &Git) -> Result<(StageSummary, Manifest), PipelineError> {
    cfg.validate()?;
    git.check_version()?;
    let candidates = read_candidates(cfg)?;
    require(cfg.path(METADATA_JSONL), "fetch")?;
    let metadata = read_metadata(cfg)?;
    let terminal = terminal_keys(cfg)?;
    let mut summary = StageSummary::default();

    let mut groups: BTreeMap<String, Vec<SimTask>> = BTreeMap::new();
    for candidate in candidates {
        let key = candidate.record.pr_key.clone();
        if terminal.contains_key(&key) {
            summary.skipped += 1;
            continue;
        }
        let Some(fetch) = metadata.get(&key).filter(|f| f.is_ok()).cloned() else { continue };
        let state = fetch.metadata.as_ref().map(|m| m.state);
        if state == Some(MetadataState::Merged) {
            continue;
        }
        groups.entry(candidate.record.repo_full_name.clone()).or_default().push(SimTask { candidate, fetch });
    }
    let groups: Vec<RepoGroup> =
        groups.into_iter().map(|(repo_full_name, tasks)| RepoGroup { repo_full_name, tasks }).collect();

    if !groups.is_empty() {
        fs::create_dir_all(&cfg.cache_dir).map_err(io_err(&cfg.cache_dir))?;
        let run_log = open_run_log(cfg)?;
        let mut results = JsonlAppender::open(cfg.path(RESULTS_JSONL))?;
        run_pool(
            groups,
            cfg.worker_count,
            |group, tx| simulate_group(cfg, git, group, tx),
            |msg: SimMessage| {
                results.append(&msg.bundle)?;
                for note in &msg.notes {
                    log(&run_log, note)?;
                }
                let code = msg.bundle.outcome.status_code();
                let mut entry = RunLogEntry::new(&msg.bundle.pr_key, msg.phase, code, true);
                entry.message = msg.bundle.outcome.message.clone();
                entry.commands = msg.commands;
                log(&run_log, &entry)?;
                summary.processed += 1;
                summary.count(code);
                Ok(())
            },
        )?;
    }
    let manifest = run_emit(cfg)?;
    Ok((summary, manifest))
}

// ------------------------------------------------------------------ emit

/// Assembles the five tables from the stage files.
pub fn assemble_tables(cfg: &PipelineConfig) -> Result<DatasetTables, PipelineError> {
    let candidates = read_candidates(cfg)?;
    let metadata = read_metadata(cfg)?;
    let bundles: Vec<PrBundle> = read_jsonl(&cfg.path(RESULTS_JSONL))?;
    let bundles: HashMap<String, PrBundle> = bundles.into_iter().map(|b| (b.pr_key.clone(), b)).collect();
    let terminal = terminal_keys(cfg)?;

    let mut tables = DatasetTables::default();
    let mut repositories: BTreeMap<String, RepositoryRecord> = BTreeMap::new();
    for c in &candidates {
        let r = &c.record;
        let fetch = metadata.get(&r.pr_key);
        let meta = fetch.and_then(|f| f.metadata.as_ref());
        let bundle = bundles.get(&r.pr_key);
        if let Some(repo) = fetch.and_then(|f| f.repository.as_ref()) {
            repositories.entry(repo.repo_full_name.clone()).or_insert_with(|| repo.clone());
        }
        let mut row = PullRequestRow {
            pr_key: r.pr_key.clone(),
            repo_full_name: r.repo_full_name.clone(),
            pr_number: r.pr_number,
            agent: r.agent.clone(),
            state: meta.map(|m| m.state.as_str()).unwrap_or(r.state.as_str()).to_string(),
            created_at: meta.and_then(|m| m.created_at).or(r.created_at),
            closed_at: meta.map_or(r.closed_at, |m| m.closed_at),
            merged_at: meta.map_or(r.merged_at, |m| m.merged_at),
            additions: Some(r.additions),
            deletions: Some(r.deletions),
            base_ref_name: meta.map(|m| m.base_ref_name.clone()),
            head_ref_name: meta.map(|m| m.head_ref_name.clone()),
            base_ref_oid: meta.map(|m| m.base_ref_oid.clone()),
            head_ref_oid: meta.map(|m| m.head_ref_oid.clone()),
            mergeable_signal: meta.map(|m| m.mergeable_signal.as_str().to_string()),
            fetch_attempts: fetch.map(|f| f.status.attempts),
            fetch_http_status: fetch.and_then(|f| f.status.http_status),
            ingest_deferred: c.deferred,
            ingest_inconsistent: c.inconsistent,
            status_code: terminal.get(&r.pr_key).copied(),
            status_message: fetch.and_then(|f| f.message.clone()),
            ..Default::default()
        };
        if let Some(b) = bundle {
            row.simulated_base_oid = Some(b.outcome.simulated_base_oid.clone());
            row.outcome = Some(b.outcome.label);
            row.num_conflict_files = b.outcome.metrics.num_conflict_files;
            row.num_conflict_regions = b.outcome.metrics.num_conflict_regions;
            row.conflict_lines = b.outcome.metrics.conflict_lines;
            row.base_provenance = b.base_provenance.map(|p| p.as_str().to_string());
            row.status_code = Some(b.outcome.status_code());
            row.status_message = b.outcome.message.clone();
            tables.files.extend(b.files.iter().cloned());
            tables.regions.extend(b.regions.iter().cloned());
            tables.commits.extend(b.commits.iter().cloned());
        }
        tables.pull_requests.push(row);
    }
    tables.repositories = repositories.into_values().collect();
    Ok(tables)
}

pub fn run_emit(cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    let tables = assemble_tables(cfg)?;
    Ok(emit_tables(&tables, &cfg.out_dir, cfg.variant)?)
}

// --------------------------------------------------------------- analyze

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutput {
    pub agent_rows: usize,
    pub summary: crate::analytics::DatasetSummary,
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), PipelineError> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    let csv_err = |e: csv::Error| PipelineError::Malformed { path: path.to_path_buf(), line: 0, message: e.to_string() };
    wtr.write_record(header).map_err(csv_err)?;
    for row in rows {
        wtr.write_record(&row).map_err(csv_err)?;
    }
    let bytes = wtr.into_inner().map_err(|e| csv_err(csv::Error::from(e.into_error())))?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a `pull_request.csv` and writes the plot-ready tables to `out_dir`.
pub fn run_analyze(pull_request_csv: &Path, out_dir: &Path) -> Result<AnalysisOutput, PipelineError> {
    let input = require(pull_request_csv.to_path_buf(), "simulate")?;
    let rows = read_pull_requests(&input)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let agents = per_agent_stats(&rows);
    write_csv(
        &out_dir.join(AGENT_RATES_CSV),
        &["agent", "prs", "conflicting_prs", "conflict_rate_pct", "ci_low_pct", "ci_high_pct"],
        agents
            .iter()
            .map(|a| {
                let e = &a.estimate;
                vec![a.agent.clone(), e.n.to_string(), e.k.to_string(), pct2(e.rate), pct2(e.ci_low), pct2(e.ci_high)]
            })
            .collect(),
    )?;

    let severity = severity_summary(&rows);
    write_csv(
        &out_dir.join(SEVERITY_SUMMARY_CSV),
        &["group", "conflicting_prs", "mean_files", "median_files", "mean_regions", "mean_lines", "median_lines", "total_regions"],
        severity
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.group.clone(),
                    r.conflicting_prs.to_string(),
                    format!("{:.2}", r.mean_files),
                    format!("{:.2}", r.median_files),
                    format!("{:.2}", r.mean_regions),
                    format!("{:.2}", r.mean_lines),
                    format!("{:.2}", r.median_lines),
                    r.total_regions.to_string(),
                ]
            })
            .collect(),
    )?;
    write_csv(
        &out_dir.join(SEVERITY_HIST_CSV),
        &["group", "conflict_lines_low", "conflict_lines_high", "prs"],
        severity
            .histogram
            .iter()
            .map(|b| vec![b.group.clone(), b.low.to_string(), b.high.to_string(), b.count.to_string()])
            .collect(),
    )?;

    let deciles = churn_deciles(&rows);
    write_csv(
        &out_dir.join(CHURN_DECILES_CSV),
        &["bin_index", "churn_min", "churn_max", "median_churn", "prs", "conflicting_prs", "conflict_rate_pct"],
        deciles
            .bins
            .iter()
            .map(|b| {
                vec![
                    b.bin_index.to_string(),
                    b.churn_min.to_string(),
                    b.churn_max.to_string(),
                    format!("{}", b.median_churn),
                    b.n.to_string(),
                    b.k.to_string(),
                    pct2(b.rate),
                ]
            })
            .collect(),
    )?;

    let summary = dataset_summary(&rows);
    let path = out_dir.join(SUMMARY_JSON);
    let doc = serde_json::json!({
        "summary": summary,
        "churn_deciles": { "missing_churn": deciles.missing_churn, "single_bin_fallback": deciles.single_bin_fallback },
    });
    fs::write(&path, serde_json::to_string_pretty(&doc).expect("summary serializes") + "\n").map_err(io_err(&path))?;
    Ok(AnalysisOutput { agent_rows: agents.len(), summary })
}

// ------------------------------------------------------------------- run

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub ingest: IngestSummary,
    pub fetch: StageSummary,
    pub simulate: StageSummary,
    /// Terminal status counts over the whole run log.
    pub terminal: BTreeMap<StatusCode, usize>,
    pub manifest: Option<Manifest>,
}

impl RunSummary {
    pub fn terminal_count(&self) -> usize {
        self.terminal.values().sum()
    }

    pub fn count(&self, code: StatusCode) -> usize {
        self.terminal.get(&code).copied().unwrap_or(0)
    }
}

/// Runs every stage in order. Per-PR failures never abort the run.
///
/// Without a client the fetch stage is skipped and metadata recorded by an
/// earlier run is replayed; the run is then implicitly resumed.
pub fn run_pipeline(cfg: &PipelineConfig, client: Option<&MetadataClient>, git: &Git) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    git.check_version()?;
    let ingest = match client {
        Some(_) => run_ingest(cfg)?,
        None => {
            require(cfg.path(METADATA_JSONL), "fetch")?;
            run_ingest(&PipelineConfig { resume: true, ..cfg.clone() })?
        }
    };
    let fetch = match client {
        Some(client) => run_fetch(cfg, client)?,
        None => StageSummary::default(),
    };
    let (simulate, manifest) = run_simulate(cfg, git)?;
    run_analyze(&cfg.path(PULL_REQUEST_CSV), &cfg.out_dir)?;
    let mut terminal = BTreeMap::new();
    for code in terminal_keys(cfg)?.into_values() {
        *terminal.entry(code).or_default() += 1;
    }
    Ok(RunSummary { ingest, fetch, simulate, terminal, manifest: Some(manifest) })
}
