//! Local git fixtures. Remotes are bare repositories served over `file://`
//! with filtering enabled, so partial clones behave like they do against
//! GitHub. All commit dates are pinned.
#![allow(dead_code)]

use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;

pub mod synth;
pub mod transcripts;

pub const EPOCH: i64 = 1_767_225_600; // 2026-01-01T00:00:00Z

pub struct Forge {
    pub dir: TempDir,
}

impl Forge {
    pub fn new() -> Self {
        Forge { dir: tempfile::tempdir().unwrap() }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn remotes(&self) -> PathBuf {
        self.path().join("remotes")
    }

    pub fn remote_base(&self) -> String {
        format!("file://{}/", self.remotes().display())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.path().join("cache")
    }

    pub fn repo(&self, full_name: &str) -> FixtureRepo {
        let bare = self.remotes().join(full_name);
        let work = self.path().join("work").join(full_name.replace('/', "__"));
        fs::create_dir_all(&bare).unwrap();
        fs::create_dir_all(&work).unwrap();
        run(&bare, &["init", "--quiet", "--bare", "--initial-branch=main"], EPOCH);
        run(&bare, &["config", "uploadpack.allowFilter", "true"], EPOCH);
        run(&bare, &["config", "uploadpack.allowAnySHA1InWant", "true"], EPOCH);
        run(&work, &["init", "--quiet", "--initial-branch=main"], EPOCH);
        FixtureRepo { work, bare, tick: Cell::new(0) }
    }
}

fn run(dir: &Path, args: &[&str], ts: i64) -> String {
    let date = format!("@{ts} +0000");
    let out = Command::new("git")
        .arg("-C")
        .arg(dir)
        .args(["-c", "user.name=Fixture", "-c", "user.email=fixture@example.com", "-c", "commit.gpgsign=false"])
        .args(args)
        .env("GIT_CONFIG_NOSYSTEM", "1")
        .env("GIT_AUTHOR_DATE", &date)
        .env("GIT_COMMITTER_DATE", &date)
        .env("LC_ALL", "C")
        .output()
        .expect("git runs");
    assert!(out.status.success(), "git {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).trim().to_string()
}

pub struct FixtureRepo {
    pub work: PathBuf,
    pub bare: PathBuf,
    tick: Cell<i64>,
}

impl FixtureRepo {
    pub fn git(&self, args: &[&str]) -> String {
        run(&self.work, args, self.now())
    }

    /// Timestamp the next commit will carry.
    pub fn now(&self) -> i64 {
        EPOCH + self.tick.get() * 3600
    }

    pub fn write(&self, path: &str, content: &str) {
        let p = self.work.join(path);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, content).unwrap();
    }

    pub fn remove(&self, path: &str) {
        fs::remove_file(self.work.join(path)).unwrap();
    }

    pub fn commit(&self, message: &str) -> String {
        self.tick.set(self.tick.get() + 1);
        self.git(&["add", "-A"]);
        self.git(&["commit", "--quiet", "--allow-empty", "-m", message]);
        self.git(&["rev-parse", "HEAD"])
    }

    pub fn branch(&self, name: &str, from: &str) {
        self.git(&["checkout", "--quiet", "-B", name, from]);
    }

    pub fn checkout(&self, name: &str) {
        self.git(&["checkout", "--quiet", name]);
    }

    /// Pushes every branch to the bare remote.
    pub fn publish(&self) {
        let url = self.bare.display().to_string();
        self.git(&["push", "--quiet", "--force", &url, "--all"]);
    }

    /// Publishes `oid` as GitHub would: reachable only via refs/pull/N/head.
    pub fn publish_pull(&self, number: u64, oid: &str) {
        let url = self.bare.display().to_string();
        self.git(&["push", "--quiet", "--force", &url, &format!("{oid}:refs/pull/{number}/head")]);
    }

    pub fn delete_remote_branch(&self, name: &str) {
        let url = self.bare.display().to_string();
        self.git(&["push", "--quiet", &url, "--delete", name]);
    }
}

pub fn numbered(lines: std::ops::RangeInclusive<u32>) -> String {
    lines.map(|i| format!("line {i}\n")).collect()
}

/// A repository with one conflicting and one clean feature branch off a
/// shared base:
/// * `conflict`: line 3 of `a.txt` edited on both sides.
/// * `clean`: adds `b.txt` only.
/// * `gone`: deletes `a.txt` while main edits it.
pub struct Scenario {
    pub repo: FixtureRepo,
    pub root: String,
    pub main: String,
    pub conflict: String,
    pub clean: String,
    pub gone: String,
}

pub fn scenario(forge: &Forge, full_name: &str) -> Scenario {
    let repo = forge.repo(full_name);
    repo.write("a.txt", &numbered(1..=5));
    let root = repo.commit("root");

    repo.branch("conflict", &root);
    repo.write("a.txt", "line 1\nline 2\nfeature three\nline 4\nline 5\n");
    let conflict = repo.commit("feature edit");

    repo.branch("clean", &root);
    repo.write("b.txt", "new file\n");
    let clean = repo.commit("add b");

    repo.branch("gone", &root);
    repo.remove("a.txt");
    let gone = repo.commit("drop a");

    repo.checkout("main");
    repo.write("a.txt", "line 1\nline 2\nmain three\nline 4\nline 5\n");
    let main = repo.commit("main edit");

    repo.publish();
    repo.publish_pull(1, &conflict);
    repo.publish_pull(2, &clean);
    repo.publish_pull(3, &gone);
    Scenario { repo, root, main, conflict, clean, gone }
}

pub mod github {
    use std::collections::HashMap;
    use std::sync::Arc;

    use chrono::{DateTime, TimeZone, Utc};
    use mergescope_core::metadata::{
        render_response, HttpResponse, MergeableSignal, MetadataState, PrMetadata, RepositoryRecord, ScriptedTransport,
    };

    pub enum Reply {
        Pr(PrMetadata),
        Status(u16),
        NullPr,
    }

    pub fn ts(secs: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(secs, 0).unwrap()
    }

    pub fn pr(key: &str, state: MetadataState, base: &str, head: &str) -> PrMetadata {
        PrMetadata {
            pr_key: key.to_string(),
            state,
            created_at: Some(ts(super::EPOCH)),
            closed_at: None,
            merged_at: None,
            base_ref_name: "main".into(),
            head_ref_name: "feature".into(),
            base_ref_oid: base.to_string(),
            head_ref_oid: head.to_string(),
            mergeable_signal: MergeableSignal::Unknown,
        }
    }

    pub fn repository(full_name: &str) -> RepositoryRecord {
        RepositoryRecord {
            repo_full_name: full_name.to_string(),
            stars: 42,
            forks: 7,
            primary_language: Some("Rust".into()),
            is_archived: false,
            is_fork: false,
        }
    }

    /// Serves `replies` keyed by pr_key; unknown keys get a 404.
    pub fn fake(replies: HashMap<String, Reply>) -> Arc<ScriptedTransport> {
        Arc::new(ScriptedTransport::new(move |req, _| {
            let v = &req.body["variables"];
            let key = format!(
                "{}/{}#{}",
                v["owner"].as_str().unwrap_or_default(),
                v["name"].as_str().unwrap_or_default(),
                v["number"].as_u64().unwrap_or_default()
            );
            let repo_name = key.split('#').next().unwrap().to_string();
            Ok(match replies.get(&key) {
                Some(Reply::Pr(meta)) => HttpResponse::new(200, render_response(&repository(&repo_name), meta)),
                Some(Reply::Status(code)) => HttpResponse::new(*code, ""),
                Some(Reply::NullPr) => HttpResponse::new(
                    200,
                    serde_json::json!({"data": {"repository": {"nameWithOwner": repo_name, "stargazerCount": 1,
                        "forkCount": 0, "primaryLanguage": null, "isArchived": false, "isFork": false,
                        "pullRequest": null}}})
                    .to_string(),
                ),
                None => HttpResponse::new(404, ""),
            })
        }))
    }
}
