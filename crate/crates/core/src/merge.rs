//! Deterministic merge simulation.
//!
//! A simulation checks out a temporary analysis branch at the base, runs a
//! non-committing, non-fast-forward merge of the head, extracts conflict
//! regions while the repository is in the conflicted state, and then puts
//! HEAD, index and worktree back exactly where they were.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::git::GitError;
use crate::metadata::{MetadataState, PrMetadata};
use crate::parser::{compute_severity, extract_file, ConflictFileRecord, ConflictRegion, ConflictType, SeverityMetrics};
use crate::repo::{RepoCache, RepoError, RepoHandle, ANALYSIS_BRANCH};
use crate::status::StatusCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeLabel {
    MergeClean,
    MergeConflict,
    MergeError,
}

impl OutcomeLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutcomeLabel::MergeClean => "merge_clean",
            OutcomeLabel::MergeConflict => "merge_conflict",
            OutcomeLabel::MergeError => "merge_error",
        }
    }

    pub fn parse(s: &str) -> Option<OutcomeLabel> {
        match s {
            "merge_clean" => Some(OutcomeLabel::MergeClean),
            "merge_conflict" => Some(OutcomeLabel::MergeConflict),
            "merge_error" => Some(OutcomeLabel::MergeError),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MergeErrorCode {
    CommitUnreachable,
    RepoUnavailable,
    MergeToolFailure,
}

impl MergeErrorCode {
    pub fn status_code(&self) -> StatusCode {
        match self {
            MergeErrorCode::CommitUnreachable => StatusCode::CommitUnreachable,
            MergeErrorCode::RepoUnavailable => StatusCode::RepoUnavailable,
            MergeErrorCode::MergeToolFailure => StatusCode::MergeToolFailure,
        }
    }
}

/// How the simulated base commit was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseProvenance {
    /// Open PR: the API's base OID as-is.
    Current,
    /// Closed PR: base-branch state at closing time.
    AtClose,
    /// Closed PR whose close-time base could not be reconstructed.
    Fallback,
}

impl BaseProvenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaseProvenance::Current => "current",
            BaseProvenance::AtClose => "at_close",
            BaseProvenance::Fallback => "fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedBase {
    pub oid: String,
    pub provenance: BaseProvenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeOutcome {
    pub pr_key: String,
    pub label: OutcomeLabel,
    pub error_code: Option<MergeErrorCode>,
    pub metrics: SeverityMetrics,
    pub simulated_base_oid: String,
    pub head_oid: String,
    pub message: Option<String>,
}

impl MergeOutcome {
    pub fn status_code(&self) -> StatusCode {
        match (self.label, self.error_code) {
            (OutcomeLabel::MergeClean, _) => StatusCode::MergeClean,
            (OutcomeLabel::MergeConflict, _) => StatusCode::MergeConflict,
            (OutcomeLabel::MergeError, Some(code)) => code.status_code(),
            (OutcomeLabel::MergeError, None) => StatusCode::MergeToolFailure,
        }
    }

    pub fn error(pr_key: &str, base: &str, head: &str, code: MergeErrorCode, message: impl Into<String>) -> Self {
        MergeOutcome {
            pr_key: pr_key.to_string(),
            label: OutcomeLabel::MergeError,
            error_code: Some(code),
            metrics: SeverityMetrics::default(),
            simulated_base_oid: base.to_string(),
            head_oid: head.to_string(),
            message: Some(message.into()),
        }
    }
}

/// Outcome plus everything extracted while the merge was in conflict.
#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub outcome: MergeOutcome,
    pub files: Vec<ConflictFileRecord>,
    pub regions: Vec<ConflictRegion>,
}

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("repository is not in a conflicted merge state")]
    NotInMergeState,
    #[error("commit {oid} is unreachable")]
    CommitUnreachable { oid: String },
    #[error("pull request state {0} cannot be simulated")]
    InvalidState(&'static str),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Git(#[from] GitError),
}

/// First commit in `history` (newest-first, first-parent order) whose
/// commit timestamp is at or before `cutoff`.
pub fn select_commit_at(history: &[(String, i64)], cutoff: i64) -> Option<&str> {
    history.iter().find(|(_, ts)| *ts <= cutoff).map(|(oid, _)| oid.as_str())
}

/// Maps index stages of one unmerged path to its conflict type.
pub fn conflict_type_from_stages(stages: &BTreeSet<u8>) -> ConflictType {
    let (base, ours, theirs) = (stages.contains(&1), stages.contains(&2), stages.contains(&3));
    match (base, ours, theirs) {
        (true, true, true) => ConflictType::BothModified,
        (true, true, false) => ConflictType::DeletedByThem,
        (true, false, true) => ConflictType::DeletedByUs,
        (false, true, true) => ConflictType::AddedByBoth,
        (false, true, false) => ConflictType::AddedByUs,
        (false, false, true) => ConflictType::AddedByThem,
        // both sides deleted; git lists it as unmerged anyway
        (_, false, false) => ConflictType::DeletedByUs,
    }
}

/// Parses `git ls-files -u -z` output into (path bytes, stages).
pub fn parse_unmerged_listing(raw: &[u8]) -> BTreeMap<Vec<u8>, BTreeSet<u8>> {
    let mut entries: BTreeMap<Vec<u8>, BTreeSet<u8>> = BTreeMap::new();
    for record in raw.split(|b| *b == 0).filter(|r| !r.is_empty()) {
        let Some(tab) = record.iter().position(|b| *b == b'\t') else { continue };
        let (meta, path) = (&record[..tab], &record[tab + 1..]);
        let stage = meta
            .rsplit(|b| *b == b' ')
            .next()
            .and_then(|s| std::str::from_utf8(s).ok())
            .and_then(|s| s.parse::<u8>().ok());
        if let Some(stage) = stage {
            entries.entry(path.to_vec()).or_default().insert(stage);
        }
    }
    entries
}

#[cfg(unix)]
fn bytes_to_path(bytes: &[u8]) -> std::path::PathBuf {
    use std::os::unix::ffi::OsStrExt;
    std::path::PathBuf::from(std::ffi::OsStr::from_bytes(bytes))
}

#[cfg(not(unix))]
fn bytes_to_path(bytes: &[u8]) -> std::path::PathBuf {
    std::path::PathBuf::from(String::from_utf8_lossy(bytes).into_owned())
}

fn read_worktree_file(root: &Path, rel: &[u8]) -> Option<Vec<u8>> {
    let path = root.join(bytes_to_path(rel));
    let meta = std::fs::symlink_metadata(&path).ok()?;
    if meta.file_type().is_symlink() {
        let target = std::fs::read_link(&path).ok()?;
        return Some(target.to_string_lossy().into_owned().into_bytes());
    }
    if meta.is_file() {
        std::fs::read(&path).ok()
    } else {
        None
    }
}

pub struct MergeSimulator<'a> {
    cache: &'a RepoCache,
    preview_lines: usize,
}

impl<'a> MergeSimulator<'a> {
    pub fn new(cache: &'a RepoCache, preview_lines: usize) -> Self {
        MergeSimulator { cache, preview_lines: preview_lines.max(1) }
    }

    /// Chooses the base commit to merge against.
    pub fn resolve_merge_base(&self, meta: &PrMetadata, handle: &RepoHandle) -> Result<ResolvedBase, MergeError> {
        match meta.state {
            MetadataState::Open => Ok(ResolvedBase { oid: meta.base_ref_oid.clone(), provenance: BaseProvenance::Current }),
            MetadataState::Merged => Err(MergeError::InvalidState("merged")),
            MetadataState::Closed => {
                if let Some(closed_at) = meta.closed_at {
                    if let Some(oid) = self.base_at(meta, handle, closed_at)? {
                        return Ok(ResolvedBase { oid, provenance: BaseProvenance::AtClose });
                    }
                }
                match self.cache.ensure_commit(handle, &meta.base_ref_oid, &[]) {
                    Ok(()) => Ok(ResolvedBase { oid: meta.base_ref_oid.clone(), provenance: BaseProvenance::Fallback }),
                    Err(RepoError::CommitUnreachable { oid }) => Err(MergeError::CommitUnreachable { oid }),
                    Err(e) => Err(e.into()),
                }
            }
        }
    }

    fn base_at(&self, meta: &PrMetadata, handle: &RepoHandle, closed_at: DateTime<Utc>) -> Result<Option<String>, MergeError> {
        let git = self.cache.git();
        let dir = &handle.local_path;
        let mut tip = None;
        if !meta.base_ref_name.is_empty() {
            tip = git.rev_parse(dir, &format!("refs/remotes/origin/{}", meta.base_ref_name))?;
        }
        if tip.is_none() && git.has_commit(dir, &meta.base_ref_oid)? {
            tip = Some(meta.base_ref_oid.clone());
        }
        let Some(tip) = tip else { return Ok(None) };
        let listing = git.stdout(dir, &["rev-list", "--first-parent", "--timestamp", &tip])?;
        let history: Vec<(String, i64)> = listing
            .lines()
            .filter_map(|l| {
                let (ts, oid) = l.split_once(' ')?;
                Some((oid.to_string(), ts.parse().ok()?))
            })
            .collect();
        Ok(select_commit_at(&history, closed_at.timestamp()).map(str::to_string))
    }

    /// Lists unmerged paths with their conflict type, sorted by path.
    pub fn list_conflicted_files(&self, handle: &RepoHandle) -> Result<Vec<(String, ConflictType)>, MergeError> {
        Ok(self
            .unmerged(handle)?
            .into_iter()
            .map(|(path, ty)| (String::from_utf8_lossy(&path).into_owned(), ty))
            .collect())
    }

    fn unmerged(&self, handle: &RepoHandle) -> Result<Vec<(Vec<u8>, ConflictType)>, MergeError> {
        let out = self.cache.git().run_ok(&handle.local_path, &["ls-files", "-u", "-z"])?;
        let entries = parse_unmerged_listing(&out.stdout);
        if entries.is_empty() {
            return Err(MergeError::NotInMergeState);
        }
        Ok(entries.into_iter().map(|(p, s)| (p, conflict_type_from_stages(&s))).collect())
    }

    /// Aborts any merge, leaves the analysis branch, deletes it and cleans
    /// the worktree. A no-op on a clean repository.
    pub fn revert_merge_state(&self, handle: &RepoHandle) -> Result<(), RepoError> {
        let git = self.cache.git();
        let dir = &handle.local_path;
        self.cache.clear_merge_state(handle)?;
        let on_branch = git
            .run(Some(dir), &["symbolic-ref", "--quiet", "--short", "HEAD"])?
            .stdout_str()
            == ANALYSIS_BRANCH;
        if on_branch {
            git.run_ok(dir, &["checkout", "--quiet", "--force", "--detach"])?;
        }
        let branch_ref = format!("refs/heads/{ANALYSIS_BRANCH}");
        if git.run(Some(dir), &["show-ref", "--verify", "--quiet", &branch_ref])?.success() {
            git.run_ok(dir, &["branch", "-D", "--quiet", ANALYSIS_BRANCH])?;
        }
        git.run_ok(dir, &["clean", "-ffdxq"])?;
        Ok(())
    }

    /// Simulates merging `head` into `base`. Per-PR failures are reported as
    /// `merge_error` outcomes; `Err` means the repository could not be
    /// restored and the cached clone should be treated as corrupt.
    pub fn simulate_merge(
        &self,
        handle: &RepoHandle,
        pr_key: &str,
        base: &str,
        head: &str,
        head_refspecs: &[String],
    ) -> Result<SimulationReport, RepoError> {
        let git = self.cache.git();
        let dir = &handle.local_path;
        let pre_head = self.cache.head_oid(handle)?;

        let error_report = |code, message: String| SimulationReport {
            outcome: MergeOutcome::error(pr_key, base, head, code, message),
            files: Vec::new(),
            regions: Vec::new(),
        };

        for (oid, refspecs) in [(base, &[][..]), (head, head_refspecs)] {
            match self.cache.ensure_commit(handle, oid, refspecs) {
                Ok(()) => {}
                Err(RepoError::CommitUnreachable { oid }) => {
                    return Ok(error_report(MergeErrorCode::CommitUnreachable, format!("commit {oid} is unreachable")));
                }
                Err(e) => return Err(e),
            }
        }

        git.run_ok(dir, &["checkout", "--quiet", "--force", "-B", ANALYSIS_BRANCH, base])?;
        let merge = git.run(Some(dir), &["merge", "--no-commit", "--no-ff", "--no-edit", "--quiet", head])?;

        let report = if merge.success() {
            SimulationReport {
                outcome: MergeOutcome {
                    pr_key: pr_key.to_string(),
                    label: OutcomeLabel::MergeClean,
                    error_code: None,
                    metrics: SeverityMetrics::default(),
                    simulated_base_oid: base.to_string(),
                    head_oid: head.to_string(),
                    message: None,
                },
                files: Vec::new(),
                regions: Vec::new(),
            }
        } else {
            match self.unmerged(handle) {
                Ok(unmerged) => self.extract(handle, pr_key, base, head, unmerged),
                Err(MergeError::NotInMergeState) => {
                    let detail = if merge.stderr.is_empty() { String::from_utf8_lossy(&merge.stdout).trim().to_string() } else { merge.stderr.clone() };
                    error_report(MergeErrorCode::MergeToolFailure, format!("merge exited with {:?}: {detail}", merge.code))
                }
                Err(MergeError::Git(e)) => error_report(MergeErrorCode::MergeToolFailure, e.to_string()),
                Err(MergeError::Repo(e)) => return Err(e),
                Err(e) => error_report(MergeErrorCode::MergeToolFailure, e.to_string()),
            }
        };

        self.revert_merge_state(handle)?;
        if let Some(pre) = &pre_head {
            if self.cache.head_oid(handle)?.as_deref() != Some(pre.as_str()) {
                git.run_ok(dir, &["checkout", "--quiet", "--force", "--detach", pre])?;
            }
        }
        if self.cache.head_oid(handle)? != pre_head || !self.cache.is_clean(handle)? {
            return Err(RepoError::CorruptCache {
                repo: handle.repo_full_name.clone(),
                detail: "repository state not restored after simulation".to_string(),
            });
        }
        Ok(report)
    }

    fn extract(
        &self,
        handle: &RepoHandle,
        pr_key: &str,
        base: &str,
        head: &str,
        unmerged: Vec<(Vec<u8>, ConflictType)>,
    ) -> SimulationReport {
        let mut files = Vec::with_capacity(unmerged.len());
        let mut regions = Vec::new();
        for (raw_path, conflict_type) in unmerged {
            let path = String::from_utf8_lossy(&raw_path).into_owned();
            let content = read_worktree_file(&handle.local_path, &raw_path);
            let extraction = extract_file(pr_key, &path, conflict_type, content.as_deref(), self.preview_lines);
            files.push(extraction.file);
            regions.extend(extraction.regions);
        }
        let metrics = compute_severity(&files).expect("records built for a single pr_key");
        SimulationReport {
            outcome: MergeOutcome {
                pr_key: pr_key.to_string(),
                label: OutcomeLabel::MergeConflict,
                error_code: None,
                metrics,
                simulated_base_oid: base.to_string(),
                head_oid: head.to_string(),
                message: None,
            },
            files,
            regions,
        }
    }
}
