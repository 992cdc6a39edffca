//! Thin wrapper around the external `git` executable.
//!
//! Every invocation is pinned to a fixed configuration (merge-style markers,
//! no rerere, no autocrlf) so simulations do not depend on user config, and
//! can be recorded verbatim for the run log.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub const MIN_GIT_VERSION: (u32, u32) = (2, 25);

const PINNED_CONFIG: &[&str] = &[
    "merge.conflictStyle=merge",
    "rerere.enabled=false",
    "core.autocrlf=false",
    "core.safecrlf=false",
    "advice.detachedHead=false",
    "merge.renames=true",
    "user.name=mergescope",
    "user.email=mergescope@localhost",
    "commit.gpgSign=false",
    "gc.auto=0",
    "maintenance.auto=false",
];

#[derive(Debug, Error)]
pub enum GitError {
    #[error("failed to spawn {program:?}: {source}")]
    Spawn {
        program: OsString,
        #[source]
        source: std::io::Error,
    },
    #[error("`{command}` exited with {code:?}: {stderr}")]
    Failed { command: String, code: Option<i32>, stderr: String },
    #[error("git {found} is older than the required {}.{}", MIN_GIT_VERSION.0, MIN_GIT_VERSION.1)]
    TooOld { found: String },
    #[error("unrecognized `git --version` output {0:?}")]
    UnknownVersion(String),
}

#[derive(Debug, Clone)]
pub struct GitOutput {
    pub code: Option<i32>,
    pub stdout: Vec<u8>,
    pub stderr: String,
}

impl GitOutput {
    pub fn success(&self) -> bool {
        self.code == Some(0)
    }

    pub fn stdout_str(&self) -> String {
        String::from_utf8_lossy(&self.stdout).trim_end().to_string()
    }
}

/// Shared, append-only list of the command lines issued.
#[derive(Debug, Clone, Default)]
pub struct Transcript(Arc<Mutex<Vec<String>>>);

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, line: String) {
        self.0.lock().unwrap().push(line);
    }

    pub fn lines(&self) -> Vec<String> {
        self.0.lock().unwrap().clone()
    }

    pub fn take(&self) -> Vec<String> {
        std::mem::take(&mut *self.0.lock().unwrap())
    }
}

#[derive(Debug, Clone)]
pub struct Git {
    program: PathBuf,
    transcript: Option<Transcript>,
    no_network: bool,
}

impl Default for Git {
    fn default() -> Self {
        Git { program: PathBuf::from("git"), transcript: None, no_network: false }
    }
}

fn quote(arg: &str) -> String {
    if !arg.is_empty() && arg.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_./=:@^{}+,%~".contains(&b)) {
        arg.to_string()
    } else {
        format!("'{}'", arg.replace('\'', "'\\''"))
    }
}

impl Git {
    pub fn with_program(program: impl Into<PathBuf>) -> Self {
        Git { program: program.into(), transcript: None, no_network: false }
    }

    /// A copy of this runner that records every command into `transcript`.
    pub fn recording(&self, transcript: Transcript) -> Git {
        Git { transcript: Some(transcript), ..self.clone() }
    }

    /// A copy that refuses every transport, including lazy blob fetches
    /// from partial clones.
    pub fn without_network(&self) -> Git {
        Git { no_network: true, ..self.clone() }
    }

    pub fn transcript(&self) -> Option<&Transcript> {
        self.transcript.as_ref()
    }

    fn command(&self, dir: Option<&Path>, args: &[&str]) -> Command {
        let mut cmd = Command::new(&self.program);
        if let Some(dir) = dir {
            cmd.arg("-C").arg(dir);
        }
        for kv in PINNED_CONFIG {
            cmd.arg("-c").arg(kv);
        }
        if self.no_network {
            cmd.arg("-c").arg("protocol.allow=never");
        }
        cmd.args(args);
        cmd.env("GIT_TERMINAL_PROMPT", "0")
            .env("GIT_CONFIG_NOSYSTEM", "1")
            .env("LC_ALL", "C")
            .env("GIT_MERGE_AUTOEDIT", "no");
        cmd
    }

    fn render(&self, dir: Option<&Path>, args: &[&str]) -> String {
        let mut parts = vec!["git".to_string()];
        if let Some(dir) = dir {
            parts.push("-C".into());
            parts.push(quote(&dir.display().to_string()));
        }
        parts.extend(args.iter().map(|a| quote(a)));
        parts.join(" ")
    }

    /// Runs git and returns its output whatever the exit status.
    pub fn run(&self, dir: Option<&Path>, args: &[&str]) -> Result<GitOutput, GitError> {
        let line = self.render(dir, args);
        if let Some(t) = &self.transcript {
            t.push(line.clone());
        }
        tracing::trace!(command = %line, "git");
        let out = self
            .command(dir, args)
            .output()
            .map_err(|source| GitError::Spawn { program: self.program.clone().into_os_string(), source })?;
        Ok(GitOutput {
            code: out.status.code(),
            stdout: out.stdout,
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        })
    }

    /// Runs git in `dir` and fails on a nonzero exit.
    pub fn run_ok(&self, dir: &Path, args: &[&str]) -> Result<GitOutput, GitError> {
        let out = self.run(Some(dir), args)?;
        if out.success() {
            Ok(out)
        } else {
            Err(GitError::Failed { command: self.render(Some(dir), args), code: out.code, stderr: out.stderr })
        }
    }

    pub fn stdout(&self, dir: &Path, args: &[&str]) -> Result<String, GitError> {
        Ok(self.run_ok(dir, args)?.stdout_str())
    }

    /// True when `rev` names a commit present in the local object store.
    pub fn has_commit(&self, dir: &Path, rev: &str) -> Result<bool, GitError> {
        let spec = format!("{rev}^{{commit}}");
        Ok(self.run(Some(dir), &["cat-file", "-e", &spec])?.success())
    }

    pub fn rev_parse(&self, dir: &Path, rev: &str) -> Result<Option<String>, GitError> {
        let spec = format!("{rev}^{{commit}}");
        let out = self.run(Some(dir), &["rev-parse", "--verify", "--quiet", &spec])?;
        Ok(out.success().then(|| out.stdout_str()))
    }

    /// Checks the installed git against [`MIN_GIT_VERSION`].
    pub fn check_version(&self) -> Result<(u32, u32, u32), GitError> {
        let out = self.run(None, &["--version"])?;
        let text = out.stdout_str();
        let version = parse_version(&text).ok_or_else(|| GitError::UnknownVersion(text.clone()))?;
        if (version.0, version.1) < MIN_GIT_VERSION {
            return Err(GitError::TooOld { found: text });
        }
        Ok(version)
    }
}

pub fn parse_version(text: &str) -> Option<(u32, u32, u32)> {
    let word = text.split_whitespace().find(|w| w.starts_with(|c: char| c.is_ascii_digit()))?;
    let mut nums = word.split('.').map(|p| p.chars().take_while(char::is_ascii_digit).collect::<String>());
    let major = nums.next()?.parse().ok()?;
    let minor = nums.next()?.parse().ok()?;
    let patch = nums.next().and_then(|p| p.parse().ok()).unwrap_or(0);
    Some((major, minor, patch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_parsing() {
        assert_eq!(parse_version("git version 2.34.1"), Some((2, 34, 1)));
        assert_eq!(parse_version("git version 2.39.3 (Apple Git-146)"), Some((2, 39, 3)));
        assert_eq!(parse_version("git version 2.45.windows.1"), Some((2, 45, 0)));
        assert_eq!(parse_version("nonsense"), None);
    }

    #[test]
    fn installed_git_is_supported() {
        Git::default().check_version().unwrap();
    }

    #[test]
    fn transcript_records_verbatim() {
        let t = Transcript::new();
        let git = Git::default().recording(t.clone());
        git.run(None, &["--version"]).unwrap();
        git.run(Some(Path::new("/tmp/a b")), &["log", "-n", "1", "--format=%H"]).ok();
        assert_eq!(t.lines(), vec!["git --version", "git -C '/tmp/a b' log -n 1 --format=%H"]);
    }
}
