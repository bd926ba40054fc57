//! Per-evaluation instrumentation, ablation summaries and anytime traces.
//!
//! One [`IterationRecord`] is written per reward observation. Its
//! `iteration` field is the index of the search call that produced it, so
//! a search call that needed several selection/simulation passes spans
//! several records with the same iteration index.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("unexpected csv header {found:?}, expected {expected:?}")]
    Header {
        found: String,
        expected: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Index of the search call this observation belongs to.
    pub iteration: usize,
    /// Algorithm time in seconds, excluding evaluator time.
    pub algorithm_time: f64,
    pub actions: u64,
    pub simulated_key: String,
    pub repeated: bool,
    pub reward: f64,
    pub best_so_far: f64,
}

/// Tracks which keys have been seen and the running best.
#[derive(Debug, Default, Clone)]
pub struct Recorder {
    records: Vec<IterationRecord>,
    seen: HashSet<String>,
    best: Option<f64>,
    failures: Vec<String>,
}

impl Recorder {
    pub fn record(
        &mut self,
        iteration: usize,
        algorithm_time: f64,
        actions: u64,
        key: &str,
        reward: f64,
    ) -> &IterationRecord {
        let repeated = !self.seen.insert(key.to_string());
        let best = self.best.map_or(reward, |b| b.max(reward));
        self.best = Some(best);
        self.records.push(IterationRecord {
            iteration,
            algorithm_time,
            actions,
            simulated_key: key.to_string(),
            repeated,
            reward,
            best_so_far: best,
        });
        self.records.last().expect("just pushed")
    }

    pub fn record_failure(&mut self, message: String) {
        self.failures.push(message);
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn failures(&self) -> &[String] {
        &self.failures
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn into_parts(self) -> (Vec<IterationRecord>, Vec<String>) {
        (self.records, self.failures)
    }
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for n < 2).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub time_iter_mean: f64,
    pub time_iter_std: f64,
    pub time_first: f64,
    pub tot_time: f64,
    pub act_iter_mean: f64,
    pub act_iter_std: f64,
    pub first_act: f64,
    pub tot_act: f64,
    pub rep_ratio: f64,
}

pub const SUMMARY_HEADER: &str =
    "time_iter_mean,time_iter_std,time_first,tot_time,act_iter_mean,act_iter_std,first_act,tot_act,rep_ratio";

pub const ITERATION_HEADER: &str = "iter,algo_time_s,actions,repeated,reward,best_so_far";

/// Summarizes one run. Time and actions are totalled per search call
/// before averaging; the first call is the one with the lowest index.
pub fn summarize(records: &[IterationRecord]) -> AblationSummary {
    let mut per_call: BTreeMap<usize, (f64, u64)> = BTreeMap::new();
    for r in records {
        let e = per_call.entry(r.iteration).or_default();
        e.0 += r.algorithm_time;
        e.1 += r.actions;
    }
    let times: Vec<f64> = per_call.values().map(|v| v.0).collect();
    let actions: Vec<f64> = per_call.values().map(|v| v.1 as f64).collect();
    let (time_iter_mean, time_iter_std) = mean_std(&times);
    let (act_iter_mean, act_iter_std) = mean_std(&actions);
    let repeated = records.iter().filter(|r| r.repeated).count();
    AblationSummary {
        time_iter_mean,
        time_iter_std,
        time_first: times.first().copied().unwrap_or(0.0),
        tot_time: times.iter().sum(),
        act_iter_mean,
        act_iter_std,
        first_act: actions.first().copied().unwrap_or(0.0),
        tot_act: actions.iter().sum(),
        rep_ratio: if records.is_empty() {
            0.0
        } else {
            repeated as f64 / records.len() as f64
        },
    }
}

/// Field-wise mean of several summaries (one row per ablation setting).
pub fn average_summaries(rows: &[AblationSummary]) -> AblationSummary {
    let col = |f: fn(&AblationSummary) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>()).0;
    AblationSummary {
        time_iter_mean: col(|s| s.time_iter_mean),
        time_iter_std: col(|s| s.time_iter_std),
        time_first: col(|s| s.time_first),
        tot_time: col(|s| s.tot_time),
        act_iter_mean: col(|s| s.act_iter_mean),
        act_iter_std: col(|s| s.act_iter_std),
        first_act: col(|s| s.first_act),
        tot_act: col(|s| s.tot_act),
        rep_ratio: col(|s| s.rep_ratio),
    }
}

// Rust's float Display is the shortest round-tripping decimal and is the
// same on every platform.
fn push_summary_row(out: &mut String, s: &AblationSummary) {
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{}",
        s.time_iter_mean,
        s.time_iter_std,
        s.time_first,
        s.tot_time,
        s.act_iter_mean,
        s.act_iter_std,
        s.first_act,
        s.tot_act,
        s.rep_ratio
    );
}

pub fn summary_csv(rows: &[AblationSummary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for s in rows {
        push_summary_row(&mut out, s);
    }
    out
}

/// Summary CSV with a leading label column (e.g. `setting`).
pub fn labelled_summary_csv(label: &str, rows: &[(String, AblationSummary)]) -> String {
    let mut out = format!("{label},{SUMMARY_HEADER}\n");
    for (name, s) in rows {
        out.push_str(name);
        out.push(',');
        push_summary_row(&mut out, s);
    }
    out
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<AblationSummary>, MetricsError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    check_header(&mut reader, SUMMARY_HEADER)?;
    Ok(reader.deserialize().collect::<Result<Vec<_>, _>>()?)
}

/// The per-iteration CSV projection of a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iter: usize,
    pub algo_time_s: f64,
    pub actions: u64,
    pub repeated: bool,
    pub reward: f64,
    pub best_so_far: f64,
}

impl From<&IterationRecord> for IterationRow {
    fn from(r: &IterationRecord) -> Self {
        IterationRow {
            iter: r.iteration,
            algo_time_s: r.algorithm_time,
            actions: r.actions,
            repeated: r.repeated,
            reward: r.reward,
            best_so_far: r.best_so_far,
        }
    }
}

pub fn iterations_csv(records: &[IterationRecord]) -> String {
    let mut out = format!("{ITERATION_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration, r.algorithm_time, r.actions, r.repeated, r.reward, r.best_so_far
        );
    }
    out
}

pub fn parse_iterations_csv(text: &str) -> Result<Vec<IterationRow>, MetricsError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    check_header(&mut reader, ITERATION_HEADER)?;
    Ok(reader.deserialize().collect::<Result<Vec<_>, _>>()?)
}

fn check_header<R: std::io::Read>(
    reader: &mut csv::Reader<R>,
    expected: &'static str,
) -> Result<(), MetricsError> {
    let found = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if found != expected {
        return Err(MetricsError::Header { found, expected });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Anytime traces

/// `(elapsed seconds, score)` points with non-decreasing score.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub points: Vec<(f64, f64)>,
}

impl RunTrace {
    /// Score at time `t`: the last point at or before `t`, if any.
    pub fn score_at(&self, t: f64) -> Option<f64> {
        let idx = self.points.partition_point(|p| p.0 <= t);
        idx.checked_sub(1).map(|i| self.points[i].1)
    }
}

/// Running best over `(elapsed, reward)` observations. With `true_max`
/// known the score is `1 - (true_max - best)`; otherwise the raw best.
pub fn anytime_trace(observations: &[(f64, f64)], true_max: Option<f64>) -> RunTrace {
    let mut best = f64::NEG_INFINITY;
    let points = observations
        .iter()
        .map(|&(t, r)| {
            best = best.max(r);
            let score = match true_max {
                Some(m) => 1.0 - (m - best),
                None => best,
            };
            (t, score)
        })
        .collect();
    RunTrace { points }
}

/// Ranks (1 = best) with ties sharing the average of their positions.
/// Missing scores rank below every present score.
pub fn average_ranks(scores: &[Option<f64>]) -> Vec<f64> {
    let key = |s: Option<f64>| s.unwrap_or(f64::NEG_INFINITY);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| key(scores[b]).total_cmp(&key(scores[a])));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && key(scores[order[j + 1]]) == key(scores[order[i]]) {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Average rank of each method at each grid point. `tasks[t][m]` is the
/// trace of method `m` on task `t`; returns `ranks[m][g]`.
pub fn aggregate_ranks(tasks: &[Vec<RunTrace>], grid: &[f64]) -> Vec<Vec<f64>> {
    let methods = tasks.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; grid.len()]; methods];
    if tasks.is_empty() {
        return out;
    }
    for traces in tasks {
        assert_eq!(
            traces.len(),
            methods,
            "every task needs one trace per method"
        );
        for (g, &t) in grid.iter().enumerate() {
            let scores: Vec<Option<f64>> = traces.iter().map(|tr| tr.score_at(t)).collect();
            for (m, r) in average_ranks(&scores).into_iter().enumerate() {
                out[m][g] += r;
            }
        }
    }
    for series in &mut out {
        for v in series.iter_mut() {
            *v /= tasks.len() as f64;
        }
    }
    out
}

/// Average score of each method at each grid point across tasks; tasks
/// without a point yet contribute zero.
pub fn aggregate_scores(tasks: &[Vec<RunTrace>], grid: &[f64]) -> Vec<Vec<f64>> {
    let methods = tasks.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; grid.len()]; methods];
    for traces in tasks {
        for (m, tr) in traces.iter().enumerate() {
            for (g, &t) in grid.iter().enumerate() {
                out[m][g] += tr.score_at(t).unwrap_or(0.0);
            }
        }
    }
    if !tasks.is_empty() {
        for v in out.iter_mut().flatten() {
            *v /= tasks.len() as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(iteration: usize, actions: u64, key: &str, repeated: bool) -> IterationRecord {
        IterationRecord {
            iteration,
            algorithm_time: actions as f64 * 1e-3,
            actions,
            simulated_key: key.into(),
            repeated,
            reward: 0.5,
            best_so_far: 0.5,
        }
    }

    #[test]
    fn summary_mean_and_sample_std() {
        let s = summarize(&[rec(0, 4, "a", false), rec(1, 6, "b", false)]);
        assert_eq!(s.act_iter_mean, 5.0);
        assert!((s.act_iter_std - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.first_act, 4.0);
        assert_eq!(s.tot_act, 10.0);
        assert_eq!(s.rep_ratio, 0.0);
    }

    #[test]
    fn records_group_by_search_call() {
        let s = summarize(&[
            rec(0, 3, "a", false),
            rec(0, 2, "b", false),
            rec(1, 1, "a", true),
        ]);
        assert_eq!(s.first_act, 5.0);
        assert_eq!(s.act_iter_mean, 3.0);
        assert!((s.rep_ratio - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn repetition_ratio_by_hand() {
        let mut r = Recorder::default();
        for (i, k) in ["a", "a", "b", "a"].iter().enumerate() {
            r.record(i, 0.0, 1, k, 0.1);
        }
        let flags: Vec<bool> = r.records().iter().map(|x| x.repeated).collect();
        assert_eq!(flags, vec![false, true, false, true]);
        assert_eq!(summarize(r.records()).rep_ratio, 0.5);
    }

    #[test]
    fn empty_summary() {
        let s = summarize(&[]);
        assert_eq!(s.rep_ratio, 0.0);
        assert_eq!(s.tot_act, 0.0);
    }

    #[test]
    fn anytime_scores() {
        let tr = anytime_trace(&[(1.0, 0.6), (2.0, 0.9)], Some(0.9));
        assert_eq!(tr.points.len(), 2);
        assert!((tr.points[0].1 - 0.7).abs() < 1e-12);
        assert_eq!(tr.points[1].1, 1.0);
        let flat = anytime_trace(&[(1.0, 0.9), (2.0, 0.3)], Some(0.9));
        assert!(flat.points.iter().all(|p| p.1 == 1.0));
        assert!(anytime_trace(&[], Some(1.0)).points.is_empty());
        let raw = anytime_trace(&[(0.0, 0.2), (1.0, 0.1)], None);
        assert_eq!(raw.points[1].1, 0.2);
        assert_eq!(raw.score_at(-1.0), None);
        assert_eq!(raw.score_at(0.5), Some(0.2));
    }

    #[test]
    fn rank_rules() {
        assert_eq!(average_ranks(&[Some(0.9), Some(0.1)]), vec![1.0, 2.0]);
        assert_eq!(average_ranks(&[Some(0.5), Some(0.5)]), vec![1.5, 1.5]);
        assert_eq!(
            average_ranks(&[None, Some(0.1), Some(0.1)]),
            vec![3.0, 1.5, 1.5]
        );
    }

    #[test]
    fn dominant_method_ranks() {
        let a = RunTrace {
            points: vec![(0.0, 0.8)],
        };
        let b = RunTrace {
            points: vec![(0.0, 0.2)],
        };
        let ranks = aggregate_ranks(&[vec![a, b]], &[0.0, 1.0]);
        assert_eq!(ranks, vec![vec![1.0, 1.0], vec![2.0, 2.0]]);
    }

    #[test]
    fn csv_headers() {
        let text = iterations_csv(&[rec(0, 4, "a", false)]);
        assert!(text.starts_with("iter,algo_time_s,actions,repeated,reward,best_so_far\n"));
        assert_eq!(text.lines().nth(1), Some("0,0.004,4,false,0.5,0.5"));
        assert!(parse_iterations_csv("a,b\n1,2\n").is_err());
        let s = summary_csv(&[summarize(&[rec(0, 4, "a", false)])]);
        assert!(s.starts_with(SUMMARY_HEADER));
    }
}
