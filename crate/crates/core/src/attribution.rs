//! Last-touch commit attribution for conflicting files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::git::{Git, GitError};
use crate::parser::ConflictFileRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictFileCommit {
    pub pr_key: String,
    pub file_path: String,
    pub head_last_touch_oid: Option<String>,
    pub base_last_touch_oid: Option<String>,
}

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("commit {0} is unreachable")]
    CommitUnreachable(String),
    #[error(transparent)]
    Git(#[from] GitError),
}

/// Most recent commit reachable from `rev` that modified `path`, with plain
/// path filtering (renames are not followed).
pub fn last_touch(git: &Git, repo: &Path, rev: &str, path: &str) -> Result<Option<String>, AttributionError> {
    if !git.has_commit(repo, rev)? {
        return Err(AttributionError::CommitUnreachable(rev.to_string()));
    }
    let oid = git.stdout(repo, &["--literal-pathspecs", "log", "-n", "1", "--format=%H", rev, "--", path])?;
    Ok(Some(oid).filter(|o| !o.is_empty()))
}

pub fn attribute_files(
    git: &Git,
    repo: &Path,
    base: &str,
    head: &str,
    files: &[ConflictFileRecord],
) -> Result<Vec<ConflictFileCommit>, AttributionError> {
    files
        .iter()
        .map(|f| {
            Ok(ConflictFileCommit {
                pr_key: f.pr_key.clone(),
                file_path: f.file_path.clone(),
                head_last_touch_oid: last_touch(git, repo, head, &f.file_path)?,
                base_last_touch_oid: last_touch(git, repo, base, &f.file_path)?,
            })
        })
        .collect()
}
