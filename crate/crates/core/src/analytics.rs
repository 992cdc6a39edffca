//! Conflict-rate, severity and churn statistics over emitted PR rows.
//!
//! The denominator of every rate is the set of successfully simulated PRs:
//! rows carrying any outcome label (clean, conflict or error). Confidence
//! intervals use the normal (Wald) approximation with z = 1.96.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PullRequestRow;
use crate::merge::OutcomeLabel;

pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RateError {
    #[error("denominator must be positive")]
    EmptyDenominator,
    #[error("numerator {k} exceeds denominator {n}")]
    NumeratorTooLarge { k: u64, n: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub n: u64,
    pub k: u64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RateEstimate {
    pub fn percent(&self) -> (f64, f64, f64) {
        (self.rate * 100.0, self.ci_low * 100.0, self.ci_high * 100.0)
    }
}

pub fn conflict_rate(k: u64, n: u64) -> Result<RateEstimate, RateError> {
    if n == 0 {
        return Err(RateError::EmptyDenominator);
    }
    if k > n {
        return Err(RateError::NumeratorTooLarge { k, n });
    }
    let rate = k as f64 / n as f64;
    let half = Z_95 * (rate * (1.0 - rate) / n as f64).sqrt();
    Ok(RateEstimate { n, k, rate, ci_low: (rate - half).max(0.0), ci_high: (rate + half).min(1.0) })
}

fn simulated(row: &PullRequestRow) -> bool {
    row.outcome.is_some()
}

fn conflicting(row: &PullRequestRow) -> bool {
    row.outcome == Some(OutcomeLabel::MergeConflict)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRate {
    pub agent: String,
    pub estimate: RateEstimate,
}

/// One estimate per agent with at least one simulated PR, ordered by rate
/// ascending, then agent name.
pub fn per_agent_stats<'a>(rows: impl IntoIterator<Item = &'a PullRequestRow>) -> Vec<AgentRate> {
    let mut counts: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for row in rows.into_iter().filter(|r| simulated(r)) {
        let entry = counts.entry(row.agent.as_str()).or_default();
        entry.0 += 1;
        if conflicting(row) {
            entry.1 += 1;
        }
    }
    let mut out: Vec<AgentRate> = counts
        .into_iter()
        .map(|(agent, (n, k))| AgentRate {
            agent: agent.to_string(),
            estimate: conflict_rate(k, n).expect("n >= 1 and k <= n by construction"),
        })
        .collect();
    out.sort_by(|a, b| a.estimate.rate.total_cmp(&b.estimate.rate).then_with(|| a.agent.cmp(&b.agent)));
    out
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Median with the midpoint convention for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 { (v[mid - 1] + v[mid]) / 2.0 } else { v[mid] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityRow {
    /// Agent name, or `ALL` for the overall row.
    pub group: String,
    pub conflicting_prs: usize,
    pub mean_files: f64,
    pub median_files: f64,
    pub mean_regions: f64,
    pub mean_lines: f64,
    pub median_lines: f64,
    pub total_regions: usize,
}

/// Decade bin of conflict lines: `[low, high)`; `low = 0, high = 1` holds PRs
/// whose conflicts carry no textual lines (modify/delete, binary).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub group: String,
    pub low: u64,
    pub high: u64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeveritySummary {
    pub rows: Vec<SeverityRow>,
    pub histogram: Vec<HistogramBin>,
}

pub const OVERALL: &str = "ALL";

fn decade(lines: usize) -> (u64, u64) {
    if lines == 0 {
        return (0, 1);
    }
    let mut low = 1u64;
    while (lines as u64) / low >= 10 {
        low *= 10;
    }
    (low, low.saturating_mul(10))
}

fn severity_row(group: &str, rows: &[&PullRequestRow]) -> SeverityRow {
    let files: Vec<f64> = rows.iter().map(|r| r.num_conflict_files as f64).collect();
    let regions: Vec<f64> = rows.iter().map(|r| r.num_conflict_regions as f64).collect();
    let lines: Vec<f64> = rows.iter().map(|r| r.conflict_lines as f64).collect();
    SeverityRow {
        group: group.to_string(),
        conflicting_prs: rows.len(),
        mean_files: mean(&files).unwrap_or(0.0),
        median_files: median(&files).unwrap_or(0.0),
        mean_regions: mean(&regions).unwrap_or(0.0),
        mean_lines: mean(&lines).unwrap_or(0.0),
        median_lines: median(&lines).unwrap_or(0.0),
        total_regions: rows.iter().map(|r| r.num_conflict_regions).sum(),
    }
}

fn histogram(group: &str, rows: &[&PullRequestRow]) -> Vec<HistogramBin> {
    let mut bins: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    for r in rows {
        *bins.entry(decade(r.conflict_lines)).or_default() += 1;
    }
    bins.into_iter().map(|((low, high), count)| HistogramBin { group: group.to_string(), low, high, count }).collect()
}

/// Severity over conflicting rows only; other rows are ignored. The overall
/// row comes first, then agents by name.
pub fn severity_summary<'a>(rows: impl IntoIterator<Item = &'a PullRequestRow>) -> SeveritySummary {
    let conflicting: Vec<&PullRequestRow> = rows.into_iter().filter(|r| conflicting(r)).collect();
    if conflicting.is_empty() {
        return SeveritySummary::default();
    }
    let mut by_agent: BTreeMap<&str, Vec<&PullRequestRow>> = BTreeMap::new();
    for r in &conflicting {
        by_agent.entry(r.agent.as_str()).or_default().push(r);
    }
    let mut summary = SeveritySummary {
        rows: vec![severity_row(OVERALL, &conflicting)],
        histogram: histogram(OVERALL, &conflicting),
    };
    for (agent, group) in by_agent {
        summary.rows.push(severity_row(agent, &group));
        summary.histogram.extend(histogram(agent, &group));
    }
    summary
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileBin {
    pub bin_index: usize,
    pub churn_min: u64,
    pub churn_max: u64,
    pub median_churn: f64,
    pub n: u64,
    pub k: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnDeciles {
    pub bins: Vec<DecileBin>,
    /// Simulated rows skipped for lack of churn data.
    pub missing_churn: usize,
    /// Fewer than ten rows: everything went into one bin.
    pub single_bin_fallback: bool,
}

impl ChurnDeciles {
    /// n-weighted mean of bin rates.
    pub fn weighted_rate(&self) -> Option<f64> {
        let n: u64 = self.bins.iter().map(|b| b.n).sum();
        (n > 0).then(|| self.bins.iter().map(|b| b.rate * b.n as f64).sum::<f64>() / n as f64)
    }
}

/// Rank-based churn deciles over simulated rows. Rows are ordered by
/// (churn, pr_key); bin `i` receives ranks `[i·N/10, (i+1)·N/10)`, so bin
/// sizes differ by at most one.
pub fn churn_deciles<'a>(rows: impl IntoIterator<Item = &'a PullRequestRow>) -> ChurnDeciles {
    let mut missing_churn = 0;
    let mut ranked: Vec<(u64, &str, bool)> = Vec::new();
    for row in rows.into_iter().filter(|r| simulated(r)) {
        match row.churn() {
            Some(churn) => ranked.push((churn, row.pr_key.as_str(), conflicting(row))),
            None => missing_churn += 1,
        }
    }
    ranked.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let total = ranked.len();
    let single_bin_fallback = total < 10;
    let bin_count = if single_bin_fallback { 1 } else { 10 };
    let mut bins = Vec::with_capacity(bin_count);
    if total == 0 {
        return ChurnDeciles { bins, missing_churn, single_bin_fallback };
    }
    for i in 0..bin_count {
        let slice = &ranked[i * total / bin_count..(i + 1) * total / bin_count];
        if slice.is_empty() {
            continue;
        }
        let churn: Vec<f64> = slice.iter().map(|r| r.0 as f64).collect();
        let n = slice.len() as u64;
        let k = slice.iter().filter(|r| r.2).count() as u64;
        bins.push(DecileBin {
            bin_index: i,
            churn_min: slice.first().map(|r| r.0).unwrap_or(0),
            churn_max: slice.last().map(|r| r.0).unwrap_or(0),
            median_churn: median(&churn).unwrap_or(0.0),
            n,
            k,
            rate: k as f64 / n as f64,
        });
    }
    ChurnDeciles { bins, missing_churn, single_bin_fallback }
}

/// Corpus-level summary counts and severity means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub total_prs: usize,
    pub simulated_prs: usize,
    pub excluded_prs: usize,
    pub simulation_success_rate: f64,
    pub conflicting_prs: usize,
    pub clean_prs: usize,
    pub error_prs: usize,
    pub conflict_rate: Option<RateEstimate>,
    pub mean_conflict_files: f64,
    pub median_conflict_files: f64,
    pub mean_conflict_regions: f64,
    pub mean_conflict_lines: f64,
    pub total_conflict_regions: usize,
    pub distinct_repositories: usize,
    pub distinct_agents: usize,
}

pub fn dataset_summary(rows: &[PullRequestRow]) -> DatasetSummary {
    let simulated_prs = rows.iter().filter(|r| simulated(r)).count();
    let count = |label| rows.iter().filter(|r| r.outcome == Some(label)).count();
    let conflicting_prs = count(OutcomeLabel::MergeConflict);
    let severity = severity_summary(rows);
    let overall = severity.rows.first();
    DatasetSummary {
        total_prs: rows.len(),
        simulated_prs,
        excluded_prs: rows.len() - simulated_prs,
        simulation_success_rate: if rows.is_empty() { 0.0 } else { simulated_prs as f64 / rows.len() as f64 },
        conflicting_prs,
        clean_prs: count(OutcomeLabel::MergeClean),
        error_prs: count(OutcomeLabel::MergeError),
        conflict_rate: conflict_rate(conflicting_prs as u64, simulated_prs as u64).ok(),
        mean_conflict_files: overall.map_or(0.0, |o| o.mean_files),
        median_conflict_files: overall.map_or(0.0, |o| o.median_files),
        mean_conflict_regions: overall.map_or(0.0, |o| o.mean_regions),
        mean_conflict_lines: overall.map_or(0.0, |o| o.mean_lines),
        total_conflict_regions: overall.map_or(0, |o| o.total_regions),
        distinct_repositories: rows.iter().map(|r| r.repo_full_name.as_str()).collect::<BTreeSet<_>>().len(),
        distinct_agents: rows.iter().map(|r| r.agent.as_str()).collect::<BTreeSet<_>>().len(),
    }
}

/// Rounds a fraction to a percentage with two decimals, as reported in tables.
pub fn pct2(fraction: f64) -> String {
    format!("{:.2}", fraction * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(key: &str, agent: &str, outcome: Option<OutcomeLabel>, churn: Option<u64>) -> PullRequestRow {
        PullRequestRow {
            pr_key: key.into(),
            repo_full_name: "a/b".into(),
            agent: agent.into(),
            outcome,
            additions: churn,
            deletions: churn.map(|_| 0),
            ..Default::default()
        }
    }

    fn conflict_row(key: &str, files: usize, regions: usize, lines: usize) -> PullRequestRow {
        PullRequestRow {
            num_conflict_files: files,
            num_conflict_regions: regions,
            conflict_lines: lines,
            ..row(key, "X", Some(OutcomeLabel::MergeConflict), Some(1))
        }
    }

    #[test]
    fn rate_basics() {
        let r = conflict_rate(0, 10).unwrap();
        assert_eq!((r.rate, r.ci_low, r.ci_high), (0.0, 0.0, 0.0));
        let r = conflict_rate(10, 10).unwrap();
        assert_eq!(r.ci_high, 1.0);
        assert_eq!(conflict_rate(1, 0), Err(RateError::EmptyDenominator));
        assert_eq!(conflict_rate(3, 2), Err(RateError::NumeratorTooLarge { k: 3, n: 2 }));
    }

    #[test]
    fn single_agent_all_clean() {
        let rows = vec![row("a/b#1", "Solo", Some(OutcomeLabel::MergeClean), None)];
        let stats = per_agent_stats(&rows);
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].estimate.rate, 0.0);
    }

    #[test]
    fn identical_agents_tie_break_by_name() {
        let mut rows = Vec::new();
        for (i, agent) in ["Zed", "Amy"].iter().enumerate() {
            rows.push(row(&format!("a/b#{}", 10 * i + 1), agent, Some(OutcomeLabel::MergeConflict), None));
            rows.push(row(&format!("a/b#{}", 10 * i + 2), agent, Some(OutcomeLabel::MergeClean), None));
        }
        // unsimulated rows never count
        rows.push(row("a/b#99", "Amy", None, None));
        let stats = per_agent_stats(&rows);
        assert_eq!(stats.iter().map(|s| s.agent.as_str()).collect::<Vec<_>>(), vec!["Amy", "Zed"]);
        assert_eq!(stats[0].estimate, stats[1].estimate);
        assert_eq!((stats[0].estimate.n, stats[0].estimate.k), (2, 1));
    }

    #[test]
    fn errors_count_in_denominator() {
        let rows = vec![
            row("a/b#1", "X", Some(OutcomeLabel::MergeConflict), None),
            row("a/b#2", "X", Some(OutcomeLabel::MergeError), None),
        ];
        assert_eq!(per_agent_stats(&rows)[0].estimate.n, 2);
    }

    #[test]
    fn severity_arithmetic() {
        let rows = vec![conflict_row("a/b#1", 1, 1, 10), conflict_row("a/b#2", 1, 1, 20), conflict_row("a/b#3", 1, 1, 30)];
        let s = severity_summary(&rows);
        assert_eq!((s.rows[0].mean_lines, s.rows[0].median_lines), (20.0, 20.0));

        let rows = vec![conflict_row("a/b#1", 2, 1, 1), conflict_row("a/b#2", 2, 1, 1), conflict_row("a/b#3", 9, 1, 1)];
        let s = severity_summary(&rows);
        assert!((s.rows[0].mean_files - 13.0 / 3.0).abs() < 1e-12);
        assert_eq!(format!("{:.2}", s.rows[0].mean_files), "4.33");
        assert_eq!(s.rows[0].median_files, 2.0);

        let rows = vec![conflict_row("a/b#1", 3, 5, 42)];
        let s = severity_summary(&rows);
        let r = &s.rows[0];
        assert_eq!((r.mean_files, r.median_files, r.mean_regions, r.mean_lines), (3.0, 3.0, 5.0, 42.0));
        assert_eq!(s.rows.len(), 2);
        assert!(severity_summary(&[]).rows.is_empty());
    }

    #[test]
    fn decade_bins() {
        assert_eq!(decade(0), (0, 1));
        assert_eq!(decade(1), (1, 10));
        assert_eq!(decade(9), (1, 10));
        assert_eq!(decade(10), (10, 100));
        assert_eq!(decade(540), (100, 1000));
        let rows = vec![conflict_row("a/b#1", 1, 1, 5), conflict_row("a/b#2", 1, 1, 50), conflict_row("a/b#3", 1, 0, 0), conflict_row("a/b#4", 1, 1, 7)];
        let h: Vec<_> = severity_summary(&rows).histogram.into_iter().filter(|b| b.group == OVERALL).map(|b| (b.low, b.count)).collect();
        assert_eq!(h, vec![(0, 1), (1, 2), (10, 1)]);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0]), Some(2.0));
        assert_eq!(median(&[5.0, 1.0, 3.0]), Some(3.0));
    }

    #[test]
    fn identical_churn_partitions_evenly() {
        let rows: Vec<_> = (0..25)
            .map(|i| row(&format!("a/b#{i}"), "X", Some(OutcomeLabel::MergeClean), Some(7)))
            .collect();
        let d = churn_deciles(&rows);
        assert_eq!(d.bins.len(), 10);
        let sizes: Vec<u64> = d.bins.iter().map(|b| b.n).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(sizes.iter().sum::<u64>(), 25);
        assert!(d.bins.iter().all(|b| b.median_churn == 7.0));
    }

    #[test]
    fn small_input_falls_back_to_one_bin() {
        let mut rows: Vec<_> = (0..4)
            .map(|i| row(&format!("a/b#{i}"), "X", Some(OutcomeLabel::MergeConflict), Some(i)))
            .collect();
        rows.push(row("a/b#9", "X", Some(OutcomeLabel::MergeClean), None));
        let d = churn_deciles(&rows);
        assert!(d.single_bin_fallback);
        assert_eq!(d.bins.len(), 1);
        assert_eq!(d.missing_churn, 1);
        assert_eq!(d.bins[0].median_churn, 1.5);
        assert!(churn_deciles(&[]).bins.is_empty());
    }

    #[test]
    fn summary_counts() {
        let rows = vec![
            conflict_row("a/b#1", 2, 3, 10),
            row("a/b#2", "Y", Some(OutcomeLabel::MergeClean), None),
            row("a/b#3", "Y", Some(OutcomeLabel::MergeError), None),
            PullRequestRow { repo_full_name: "c/d".into(), ..row("c/d#4", "Y", None, None) },
        ];
        let s = dataset_summary(&rows);
        assert_eq!((s.total_prs, s.simulated_prs, s.excluded_prs), (4, 3, 1));
        assert_eq!((s.conflicting_prs, s.clean_prs, s.error_prs), (1, 1, 1));
        assert_eq!(s.total_conflict_regions, 3);
        assert_eq!((s.distinct_repositories, s.distinct_agents), (2, 2));
        assert!((s.conflict_rate.unwrap().rate - 1.0 / 3.0).abs() < 1e-12);
    }
}
