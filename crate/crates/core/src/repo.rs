//! Persistent cache of partial clones plus deterministic worktree preparation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::git::{Git, GitError};
use crate::status::StatusCode;

/// Branch created for the duration of one simulation.
pub const ANALYSIS_BRANCH: &str = "mergescope-analysis";

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("clone of {repo} failed: {detail}")]
    CloneFailed { repo: String, detail: String },
    #[error("cached clone of {repo} is corrupt: {detail}")]
    CorruptCache { repo: String, detail: String },
    #[error("commit {oid} is unreachable")]
    CommitUnreachable { oid: String },
    #[error("{repo} is not cached and the cache is offline")]
    Offline { repo: String },
    #[error("repository lock {path} is held by another process")]
    Locked { path: PathBuf },
    #[error("malformed repository name {0:?}")]
    BadName(String),
    #[error(transparent)]
    Git(#[from] GitError),
    #[error("cache I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RepoError {
    pub fn status_code(&self) -> StatusCode {
        match self {
            RepoError::CommitUnreachable { .. } => StatusCode::CommitUnreachable,
            RepoError::Git(_) => StatusCode::MergeToolFailure,
            _ => StatusCode::RepoUnavailable,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RepoError + '_ {
    move |source| RepoError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheAction {
    Cloned,
    /// The cached clone was unhealthy, evicted and cloned again.
    Recloned,
    Fetched,
    /// Used as-is (offline, or the sync fetch failed).
    Reused,
}

#[derive(Debug, Clone)]
pub struct RepoHandle {
    pub repo_full_name: String,
    pub local_path: PathBuf,
    pub last_fetch_at: Option<DateTime<Utc>>,
    pub action: CacheAction,
    pub offline: bool,
}

/// Exclusive per-repository lock file; removed on drop.
#[derive(Debug)]
pub struct RepoLock {
    path: PathBuf,
}

impl RepoLock {
    pub fn acquire(path: &Path, timeout: Duration) -> Result<RepoLock, RepoError> {
        let deadline = Instant::now() + timeout;
        loop {
            match OpenOptions::new().write(true).create_new(true).open(path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(RepoLock { path: path.to_path_buf() });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if lock_is_stale(path) {
                        let _ = fs::remove_file(path);
                        continue;
                    }
                    if Instant::now() >= deadline {
                        return Err(RepoError::Locked { path: path.to_path_buf() });
                    }
                    std::thread::sleep(Duration::from_millis(50));
                }
                Err(e) => return Err(io_err(path)(e)),
            }
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for RepoLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// A lock whose recorded owner no longer runs (Linux /proc check only).
fn lock_is_stale(path: &Path) -> bool {
    let Ok(text) = fs::read_to_string(path) else { return false };
    let Ok(pid) = text.trim().parse::<u32>() else { return false };
    let proc_root = Path::new("/proc");
    proc_root.is_dir() && !proc_root.join(pid.to_string()).exists()
}

#[derive(Debug, Clone)]
pub struct RepoCache {
    root: PathBuf,
    git: Git,
    offline: bool,
    remote_base: String,
    lock_timeout: Duration,
}

impl RepoCache {
    pub fn new(root: impl Into<PathBuf>, git: Git) -> Self {
        RepoCache {
            root: root.into(),
            git,
            offline: false,
            remote_base: "https://github.com/".to_string(),
            lock_timeout: Duration::from_secs(600),
        }
    }

    /// Fail instead of cloning or fetching.
    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        if offline {
            self.git = self.git.without_network();
        }
        self
    }

    /// Prefix joined with `owner/repository` to form clone URLs.
    pub fn remote_base(mut self, base: impl Into<String>) -> Self {
        let mut base = base.into();
        if !base.ends_with('/') {
            base.push('/');
        }
        self.remote_base = base;
        self
    }

    pub fn lock_timeout(mut self, timeout: Duration) -> Self {
        self.lock_timeout = timeout;
        self
    }

    /// Same cache, different git runner (e.g. one that records a transcript).
    pub fn with_git(&self, git: Git) -> Self {
        let git = if self.offline { git.without_network() } else { git };
        RepoCache { git, ..self.clone() }
    }

    pub fn git(&self) -> &Git {
        &self.git
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_offline(&self) -> bool {
        self.offline
    }

    pub fn remote_url(&self, repo_full_name: &str) -> String {
        format!("{}{}", self.remote_base, repo_full_name)
    }

    /// `cache_root/owner__repository`.
    pub fn repo_path(&self, repo_full_name: &str) -> Result<PathBuf, RepoError> {
        let (owner, name) = repo_full_name
            .split_once('/')
            .filter(|(o, n)| !o.is_empty() && !n.is_empty() && !n.contains('/') && *o != ".." && *n != "..")
            .ok_or_else(|| RepoError::BadName(repo_full_name.to_string()))?;
        Ok(self.root.join(format!("{owner}__{name}")))
    }

    pub fn lock(&self, repo_full_name: &str) -> Result<RepoLock, RepoError> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let mut path = self.repo_path(repo_full_name)?.into_os_string();
        path.push(".lock");
        RepoLock::acquire(Path::new(&path), self.lock_timeout)
    }

    pub fn ensure_repo(&self, repo_full_name: &str) -> Result<RepoHandle, RepoError> {
        let path = self.repo_path(repo_full_name)?;
        let mut evicted = false;
        if path.exists() {
            match self.health_check(repo_full_name, &path) {
                Ok(()) => return Ok(self.sync(repo_full_name, path)),
                Err(detail) => {
                    tracing::warn!(repo = repo_full_name, %detail, "evicting unhealthy cached clone");
                    fs::remove_dir_all(&path).map_err(io_err(&path))?;
                    evicted = true;
                }
            }
        }
        if self.offline {
            return Err(RepoError::Offline { repo: repo_full_name.to_string() });
        }
        self.clone_into(repo_full_name, &path)?;
        if let Err(detail) = self.health_check(repo_full_name, &path) {
            return Err(RepoError::CorruptCache { repo: repo_full_name.to_string(), detail });
        }
        Ok(RepoHandle {
            repo_full_name: repo_full_name.to_string(),
            local_path: path,
            last_fetch_at: Some(Utc::now()),
            action: if evicted { CacheAction::Recloned } else { CacheAction::Cloned },
            offline: self.offline,
        })
    }

    fn sync(&self, repo_full_name: &str, path: PathBuf) -> RepoHandle {
        let mut handle = RepoHandle {
            repo_full_name: repo_full_name.to_string(),
            local_path: path,
            last_fetch_at: None,
            action: CacheAction::Reused,
            offline: self.offline,
        };
        if self.offline {
            return handle;
        }
        match self.git.run_ok(&handle.local_path, &["fetch", "--prune", "--no-tags", "--quiet", "origin"]) {
            Ok(_) => {
                handle.action = CacheAction::Fetched;
                handle.last_fetch_at = Some(Utc::now());
            }
            Err(e) => tracing::warn!(repo = repo_full_name, error = %e, "sync fetch failed; using cached state"),
        }
        handle
    }

    fn clone_into(&self, repo_full_name: &str, path: &Path) -> Result<(), RepoError> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let staging = self.root.join(format!(
            ".staging-{}-{}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("repo"),
            std::process::id()
        ));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
        }
        let url = self.remote_url(repo_full_name);
        let staging_str = staging.to_string_lossy().to_string();
        let out = self.git.run(
            None,
            &["clone", "--quiet", "--filter=blob:none", "--no-checkout", "--origin", "origin", &url, &staging_str],
        )?;
        if !out.success() {
            let _ = fs::remove_dir_all(&staging);
            return Err(RepoError::CloneFailed { repo: repo_full_name.to_string(), detail: out.stderr });
        }
        fs::rename(&staging, path).map_err(io_err(path))
    }

    fn health_check(&self, repo_full_name: &str, path: &Path) -> Result<(), String> {
        let git_dir = self.git.run(Some(path), &["rev-parse", "--git-dir"]).map_err(|e| e.to_string())?;
        if !git_dir.success() || git_dir.stdout_str() != ".git" {
            return Err(format!("not a repository root: {}", git_dir.stderr));
        }
        let origin = self
            .git
            .run(Some(path), &["config", "--get", "remote.origin.url"])
            .map_err(|e| e.to_string())?;
        let expected = self.remote_url(repo_full_name);
        if origin.stdout_str() != expected {
            return Err(format!("origin is {:?}, expected {expected:?}", origin.stdout_str()));
        }
        // --missing disables lazy fetching, so damaged local objects are not papered over
        let objects = self
            .git
            .run(Some(path), &["rev-list", "--missing=allow-promisor", "--objects", "-n", "1", "HEAD"])
            .map_err(|e| e.to_string())?;
        if !objects.success() {
            return Err(format!("object store check failed: {}", objects.stderr));
        }
        Ok(())
    }

    /// Makes `oid` available locally, fetching it (and `extra_refspecs`) if needed.
    pub fn ensure_commit(&self, handle: &RepoHandle, oid: &str, extra_refspecs: &[String]) -> Result<(), RepoError> {
        let dir = &handle.local_path;
        if self.git.has_commit(dir, oid)? {
            return Ok(());
        }
        if !self.offline {
            let _ = self.git.run(Some(dir), &["fetch", "--quiet", "--no-tags", "origin", oid])?;
            if self.git.has_commit(dir, oid)? {
                return Ok(());
            }
            for refspec in extra_refspecs {
                let _ = self.git.run(Some(dir), &["fetch", "--quiet", "--no-tags", "origin", refspec])?;
            }
            if self.git.has_commit(dir, oid)? {
                return Ok(());
            }
        }
        Err(RepoError::CommitUnreachable { oid: oid.to_string() })
    }

    /// Resets the worktree to exactly `base_oid`: detached HEAD, clean index,
    /// no untracked files, no merge residue.
    pub fn prepare_worktree(&self, handle: &RepoHandle, base_oid: &str) -> Result<(), RepoError> {
        self.ensure_commit(handle, base_oid, &[])?;
        let dir = &handle.local_path;
        self.clear_merge_state(handle)?;
        self.git.run_ok(dir, &["checkout", "--quiet", "--force", "--detach", base_oid])?;
        self.git.run_ok(dir, &["reset", "--quiet", "--hard", base_oid])?;
        self.git.run_ok(dir, &["clean", "-ffdxq"])?;
        let branch_ref = format!("refs/heads/{ANALYSIS_BRANCH}");
        if self.git.run(Some(dir), &["show-ref", "--verify", "--quiet", &branch_ref])?.success() {
            self.git.run_ok(dir, &["branch", "-D", "--quiet", ANALYSIS_BRANCH])?;
        }
        if !self.is_clean(handle)? {
            return Err(RepoError::CorruptCache {
                repo: handle.repo_full_name.clone(),
                detail: "worktree not clean after reset".to_string(),
            });
        }
        Ok(())
    }

    pub(crate) fn clear_merge_state(&self, handle: &RepoHandle) -> Result<(), RepoError> {
        let dir = &handle.local_path;
        if self.git.rev_parse(dir, "MERGE_HEAD")?.is_some() {
            let _ = self.git.run(Some(dir), &["merge", "--abort"])?;
        }
        if self.git.rev_parse(dir, "HEAD")?.is_some() && dir.join(".git/index").exists() {
            let _ = self.git.run(Some(dir), &["reset", "--quiet", "--hard"])?;
        }
        Ok(())
    }

    /// `git status --porcelain` reports nothing (untracked files included).
    pub fn is_clean(&self, handle: &RepoHandle) -> Result<bool, RepoError> {
        let out = self
            .git
            .run_ok(&handle.local_path, &["status", "--porcelain=v1", "--untracked-files=all", "--ignored"])?;
        Ok(out.stdout.is_empty())
    }

    pub fn head_oid(&self, handle: &RepoHandle) -> Result<Option<String>, RepoError> {
        Ok(self.git.rev_parse(&handle.local_path, "HEAD")?)
    }
}
