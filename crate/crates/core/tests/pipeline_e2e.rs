mod common;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use common::github::{fake, pr, ts, Reply};
use common::{scenario, Forge, Scenario};
use mergescope_core::dataset::{
    distinct_keys, read_conflict_files, read_pull_requests, read_run_log, terminal_statuses, Variant, PULL_REQUEST_CSV,
};
use mergescope_core::git::Git;
use mergescope_core::merge::OutcomeLabel;
use mergescope_core::metadata::{ManualClock, MetadataState, ScriptedTransport};
use mergescope_core::pipeline::*;
use mergescope_core::status::StatusCode;
use sha2::{Digest, Sha256};

const CORPUS: &str = "repo_full_name,pr_number,agent,state,created_at,closed_at,merged_at,additions,deletions
octo/widgets,1,Devin,open,2026-01-01T00:00:00Z,,,10,2
octo/widgets,2,Copilot,open,2026-01-01T00:00:00Z,,,5,0
octo/widgets,3,Devin,closed,2026-01-01T00:00:00Z,2026-01-03T00:00:00Z,,1,40
octo/widgets,4,Copilot,closed,2026-01-01T00:00:00Z,2026-01-02T00:00:00Z,2026-01-02T00:00:00Z,3,3
octo/widgets,5,Cursor,open,,,,1,1
octo/widgets,6,Cursor,open,,,,2,2
octo/widgets,1,Devin,open,,,,10,2
bad name,1,Devin,open,,,,1,1
octo/widgets,7,Devin,open,,,,8,8
octo/missing,1,Copilot,open,,,,9,9
octo/widgets,8,Copilot,,,,,4,4
";

struct World {
    forge: Forge,
    s: Scenario,
    private: String,
}

fn world() -> World {
    let forge = Forge::new();
    let s = scenario(&forge, "octo/widgets");
    s.repo.write("private.txt", "x\n");
    let private = s.repo.commit("never pushed");
    s.repo.checkout("main");
    fs::write(forge.path().join("corpus.csv"), CORPUS).unwrap();
    World { forge, s, private }
}

fn transport(w: &World) -> Arc<ScriptedTransport> {
    let s = &w.s;
    let mut replies = HashMap::new();
    replies.insert("octo/widgets#1".to_string(), Reply::Pr(pr("octo/widgets#1", MetadataState::Open, &s.main, &s.conflict)));
    replies.insert("octo/widgets#2".to_string(), Reply::Pr(pr("octo/widgets#2", MetadataState::Open, &s.main, &s.clean)));
    let mut closed = pr("octo/widgets#3", MetadataState::Closed, &s.main, &s.gone);
    closed.closed_at = Some(ts(common::EPOCH + 10 * 3600));
    replies.insert("octo/widgets#3".to_string(), Reply::Pr(closed));
    replies.insert("octo/widgets#5".to_string(), Reply::NullPr);
    let mut merged = pr("octo/widgets#6", MetadataState::Merged, &s.main, &s.clean);
    merged.merged_at = Some(ts(common::EPOCH + 3600));
    replies.insert("octo/widgets#6".to_string(), Reply::Pr(merged));
    replies.insert("octo/widgets#7".to_string(), Reply::Pr(pr("octo/widgets#7", MetadataState::Open, &s.main, &w.private)));
    replies.insert("octo/missing#1".to_string(), Reply::Pr(pr("octo/missing#1", MetadataState::Open, &s.main, &s.clean)));
    replies.insert("octo/widgets#8".to_string(), Reply::Pr(pr("octo/widgets#8", MetadataState::Open, &s.main, &s.conflict)));
    fake(replies)
}

fn config(w: &World, out: &str, workers: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(w.forge.path().join(out), w.forge.cache_dir());
    cfg.corpus_path = Some(w.forge.path().join("corpus.csv"));
    cfg.tokens = vec!["t1".into(), "t2".into()];
    cfg.worker_count = workers;
    cfg.remote_base = w.forge.remote_base();
    cfg.variant = Variant::Raw;
    cfg
}

fn run(cfg: &PipelineConfig, transport: Arc<ScriptedTransport>) -> RunSummary {
    let clock = Arc::new(ManualClock::new(ts(common::EPOCH)));
    let client = metadata_client(cfg, transport, clock).unwrap();
    run_pipeline(cfg, Some(&client), &Git::default()).unwrap()
}

fn text(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn full_run_statuses_tables_and_log() {
    let w = world();
    let cfg = config(&w, "out", 2);
    let summary = run(&cfg, transport(&w));

    let expected: BTreeMap<StatusCode, usize> = [
        (StatusCode::MergeConflict, 3),
        (StatusCode::MergeClean, 1),
        (StatusCode::ExcludedMerged, 2),
        (StatusCode::NotFound, 1),
        (StatusCode::CommitUnreachable, 1),
        (StatusCode::RepoUnavailable, 1),
        (StatusCode::InvalidRecord, 1),
    ]
    .into_iter()
    .collect();
    assert_eq!(summary.terminal, expected);
    assert_eq!(summary.ingest.excluded_duplicate, 1);
    assert_eq!(summary.ingest.deferred, 1);

    // every key in the log has exactly one terminal entry
    let log = read_run_log(&cfg.out_dir.join(RUN_LOG_JSONL)).unwrap();
    let terminal = terminal_statuses(&log);
    assert_eq!(distinct_keys(&log).len(), terminal.len());
    for key in distinct_keys(&log) {
        assert_eq!(log.iter().filter(|e| e.pr_key == key && e.terminal).count(), 1, "{key}");
    }
    let sim = log.iter().find(|e| e.pr_key == "octo/widgets#1" && e.terminal).unwrap();
    assert!(sim.commands.iter().any(|c| c.contains(" merge --no-commit --no-ff")), "{:?}", sim.commands);

    let rows = read_pull_requests(&cfg.out_dir.join(PULL_REQUEST_CSV)).unwrap();
    let by_key: HashMap<_, _> = rows.iter().map(|r| (r.pr_key.as_str(), r)).collect();
    assert_eq!(rows.len(), 8, "one row per retained candidate");
    assert_eq!(by_key["octo/widgets#1"].outcome, Some(OutcomeLabel::MergeConflict));
    assert_eq!(by_key["octo/widgets#1"].conflict_lines, 2);
    assert_eq!(by_key["octo/widgets#2"].outcome, Some(OutcomeLabel::MergeClean));
    assert_eq!(by_key["octo/widgets#3"].simulated_base_oid.as_deref(), Some(w.s.main.as_str()));
    assert_eq!(by_key["octo/widgets#7"].outcome, Some(OutcomeLabel::MergeError));
    assert_eq!(by_key["octo/widgets#5"].outcome, None);
    assert_eq!(by_key["octo/widgets#5"].status_code, Some(StatusCode::NotFound));
    assert_eq!(by_key["octo/missing#1"].status_code, Some(StatusCode::RepoUnavailable));
    assert_eq!(by_key["octo/widgets#8"].num_conflict_regions, 1);

    let files = read_conflict_files(&cfg.out_dir.join("conflict_file.csv")).unwrap();
    assert_eq!(files.len(), 3);

    // manifest hashes match the bytes on disk
    let manifest = summary.manifest.unwrap();
    for entry in &manifest.files {
        assert_eq!(entry.sha256, sha(&cfg.out_dir.join(&entry.name)), "{}", entry.name);
    }
    assert_eq!(manifest.rows("pull_request.csv"), Some(8));
    for name in [AGENT_RATES_CSV, SEVERITY_SUMMARY_CSV, SEVERITY_HIST_CSV, CHURN_DECILES_CSV, SUMMARY_JSON] {
        assert!(cfg.out_dir.join(name).exists(), "{name}");
    }
    let rates = fs::read_to_string(cfg.out_dir.join(AGENT_RATES_CSV)).unwrap();
    assert!(rates.contains("Devin,3,2,66.67,"), "{rates}");
}

#[test]
fn worker_count_does_not_change_output() {
    let w = world();
    let one = config(&w, "one", 1);
    run(&one, transport(&w));
    let mut four = config(&w, "four", 4);
    four.cache_dir = w.forge.path().join("cache4");
    run(&four, transport(&w));
    for name in ["repository.csv", "pull_request.csv", "conflict_file.csv", "conflict_region.csv", "conflict_file_commit.csv", "manifest.json"] {
        assert_eq!(sha(&one.out_dir.join(name)), sha(&four.out_dir.join(name)), "{name}");
    }
}

#[test]
fn resume_only_processes_unfinished_prs() {
    let w = world();
    let cfg = config(&w, "out", 2);
    let t = transport(&w);
    run(&cfg, t.clone());
    let baseline = text(&cfg.out_dir.join(PULL_REQUEST_CSV));
    let requests = t.requests().len();

    // simulate a crash: drop two finished PRs' simulate results and leave a torn line
    let log_path = cfg.out_dir.join(RUN_LOG_JSONL);
    let lost = ["octo/widgets#1", "octo/widgets#2"];
    let kept: Vec<String> = fs::read_to_string(&log_path)
        .unwrap()
        .lines()
        .filter(|l| {
            let e: serde_json::Value = serde_json::from_str(l).unwrap();
            !(e["terminal"] == true && lost.contains(&e["pr_key"].as_str().unwrap()))
        })
        .map(str::to_string)
        .collect();
    fs::write(&log_path, kept.join("\n") + "\n{\"pr_key\":\"octo/wid").unwrap();
    let results_path = cfg.out_dir.join(RESULTS_JSONL);
    let kept: Vec<String> = fs::read_to_string(&results_path)
        .unwrap()
        .lines()
        .filter(|l| !lost.iter().any(|k| l.contains(&format!("\"pr_key\":\"{k}\""))))
        .map(str::to_string)
        .collect();
    fs::write(&results_path, kept.join("\n") + "\n").unwrap();

    let mut resumed = cfg.clone();
    resumed.resume = true;
    let summary = run(&resumed, t.clone());
    assert_eq!(summary.simulate.processed, 2);
    assert_eq!(summary.fetch.processed, 0);
    assert_eq!(t.requests().len(), requests, "no metadata refetch on resume");
    assert_eq!(text(&cfg.out_dir.join(PULL_REQUEST_CSV)), baseline);

    // a second resume is a no-op
    let summary = run(&resumed, t.clone());
    assert_eq!((summary.fetch.processed, summary.simulate.processed), (0, 0));
    assert_eq!(text(&cfg.out_dir.join(PULL_REQUEST_CSV)), baseline);
}

#[test]
fn offline_simulate_uses_only_the_cache() {
    let w = world();
    let cfg = config(&w, "out", 2);
    run(&cfg, transport(&w));

    let mut offline = config(&w, "offline", 2);
    offline.offline = true;
    fs::create_dir_all(&offline.out_dir).unwrap();
    for name in [CANDIDATES_JSONL, METADATA_JSONL] {
        fs::copy(cfg.out_dir.join(name), offline.out_dir.join(name)).unwrap();
    }
    // keep the fetch-stage terminal entries so excluded PRs stay excluded
    let fetch_only: Vec<String> = fs::read_to_string(cfg.out_dir.join(RUN_LOG_JSONL))
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"phase\":\"ingest\"") || l.contains("\"phase\":\"fetch\""))
        .map(str::to_string)
        .collect();
    fs::write(offline.out_dir.join(RUN_LOG_JSONL), fetch_only.join("\n") + "\n").unwrap();

    run_simulate(&offline, &Git::default()).unwrap();
    let log = read_run_log(&offline.out_dir.join(RUN_LOG_JSONL)).unwrap();
    for e in &log {
        for c in &e.commands {
            assert!(!c.contains(" fetch ") && !c.contains(" clone "), "{c}");
        }
    }
    for name in ["conflict_file.csv", "conflict_region.csv", "conflict_file_commit.csv"] {
        assert_eq!(text(&cfg.out_dir.join(name)), text(&offline.out_dir.join(name)), "{name}");
    }
    let outcomes = |dir: &Path| -> Vec<_> {
        read_pull_requests(&dir.join(PULL_REQUEST_CSV)).unwrap().into_iter().map(|r| (r.pr_key, r.outcome, r.status_code)).collect()
    };
    assert_eq!(outcomes(&cfg.out_dir), outcomes(&offline.out_dir));
}

#[test]
fn empty_corpus_means_no_work() {
    let forge = Forge::new();
    fs::write(forge.path().join("corpus.csv"), "repo_full_name,pr_number\n").unwrap();
    let mut cfg = PipelineConfig::new(forge.path().join("out"), forge.cache_dir());
    cfg.corpus_path = Some(forge.path().join("corpus.csv"));
    cfg.tokens = vec!["t".into()];
    let t = fake(HashMap::new());
    let summary = run(&cfg, t.clone());
    assert_eq!(summary.terminal_count(), 0);
    assert!(t.requests().is_empty());
}
