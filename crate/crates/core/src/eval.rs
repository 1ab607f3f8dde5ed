//! Full-catalog ranking of held-out targets and the metric suite.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matrix::dot;
use crate::models::Model;
use crate::session_data::{Session, FIRST_ITEM};

pub const HR_CUTOFFS: [usize; 4] = [1, 5, 10, 20];
pub const MRR_CUTOFF: usize = 10;

/// Rank of `target` among real items `FIRST_ITEM..scores.len()`.
///
/// `scores[j]` is the score of item `j`; entries below `FIRST_ITEM` are ignored.
/// Equal scores are ordered by ascending index.
pub fn rank_from_scores(scores: &[f64], target: usize) -> usize {
    let st = scores[target];
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate().skip(FIRST_ITEM) {
        if s > st || (s == st && j < target) {
            rank += 1;
        }
    }
    rank
}

/// Scores of every index against `pred` (reserved rows included, then ignored).
pub fn score_catalog(pred: &[f64], model: &Model) -> Vec<f64> {
    let emb = model.item_embeddings();
    (0..emb.rows()).map(|j| dot(pred, emb.row(j))).collect()
}

fn check_target(target: usize, vocab_size: usize) -> Result<()> {
    if target < FIRST_ITEM || target >= vocab_size {
        return Err(Error::Data(format!(
            "target {target} is not a real item of a vocabulary of size {vocab_size}"
        )));
    }
    Ok(())
}

pub fn rank_target(model: &Model, prefix: &[usize], target: usize) -> Result<usize> {
    check_target(target, model.config.vocab_size)?;
    let pred = model.predict_next(prefix)?;
    Ok(rank_from_scores(&score_catalog(&pred, model), target))
}

/// Neumaier-compensated mean.
fn stable_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp, mut n) = (0.0f64, 0.0f64, 0usize);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (sum + comp) / n as f64
    }
}

fn truncated_rr(rank: usize) -> f64 {
    if rank <= MRR_CUTOFF {
        1.0 / rank as f64
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hr1: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub hr20: f64,
    pub map10: f64,
    /// `None` when no skipped test target exists.
    pub skip_mrr10: Option<f64>,
    pub n_pos: usize,
    pub n_skip: usize,
}

impl MetricsReport {
    pub fn hr(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.hr1),
            5 => Some(self.hr5),
            10 => Some(self.hr10),
            20 => Some(self.hr20),
            _ => None,
        }
    }
}

pub fn hit_rate(ranks: &[usize], k: usize) -> f64 {
    stable_mean(ranks.iter().map(|&r| if r <= k { 1.0 } else { 0.0 }))
}

pub fn mrr_at_10(ranks: &[usize]) -> f64 {
    stable_mean(ranks.iter().map(|&r| truncated_rr(r)))
}

/// Average precision at 10 for a context with one relevant item at `rank`.
fn average_precision_at_10(rank: usize) -> f64 {
    let mut hits = 0.0;
    let mut total = 0.0;
    for k in 1..=MRR_CUTOFF {
        if k == rank {
            hits += 1.0;
            total += hits / k as f64;
        }
    }
    total
}

pub fn map_at_10(ranks: &[usize]) -> f64 {
    stable_mean(ranks.iter().map(|&r| average_precision_at_10(r)))
}

pub fn compute_metrics(positive_ranks: &[usize], skip_ranks: &[usize]) -> Result<MetricsReport> {
    if positive_ranks.is_empty() {
        return Err(Error::Data("no positive test target to evaluate".into()));
    }
    if positive_ranks.iter().chain(skip_ranks).any(|&r| r == 0) {
        return Err(Error::Data("ranks start at 1".into()));
    }
    Ok(MetricsReport {
        hr1: hit_rate(positive_ranks, 1),
        hr5: hit_rate(positive_ranks, 5),
        hr10: hit_rate(positive_ranks, 10),
        hr20: hit_rate(positive_ranks, 20),
        map10: map_at_10(positive_ranks),
        skip_mrr10: (!skip_ranks.is_empty()).then(|| mrr_at_10(skip_ranks)),
        n_pos: positive_ranks.len(),
        n_skip: skip_ranks.len(),
    })
}

/// Ranks the test target of every session with a holdout split.
/// `rank` receives the session index, the test prefix and the target.
pub fn collect_ranks<F>(dataset: &Dataset, mut rank: F) -> Result<(Vec<usize>, Vec<usize>)>
where
    F: FnMut(usize, &Session, usize) -> Result<usize>,
{
    let (mut pos, mut skip) = (Vec::new(), Vec::new());
    for (i, s) in dataset.sessions.iter().enumerate() {
        let Ok(split) = crate::session_data::holdout_split(s) else {
            continue;
        };
        let (target, skipped) = split.test_target;
        let r = rank(i, &split.test_prefix(), target)?;
        if skipped {
            skip.push(r);
        } else {
            pos.push(r);
        }
    }
    Ok((pos, skip))
}

/// Test-set metrics of a trained encoder. `vocab_hash` is the hash recorded
/// with the model and must match the dataset's vocabulary.
pub fn evaluate(model: &Model, vocab_hash: &str, dataset: &Dataset) -> Result<MetricsReport> {
    let actual = dataset.vocab.hash();
    if actual != vocab_hash || dataset.vocab.len() != model.config.vocab_size {
        return Err(Error::Integrity(format!(
            "vocabulary hash {actual} does not match checkpoint {vocab_hash}"
        )));
    }
    let (pos, skip) = collect_ranks(dataset, |_, prefix, target| {
        rank_target(model, prefix.items(), target)
    })?;
    compute_metrics(&pos, &skip)
}

/// Metrics file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub model: String,
    pub dataset_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub report: MetricsReport,
}

impl MetricsFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub const COMPARED_METRICS: [&str; 6] = ["hr1", "hr5", "hr10", "hr20", "map10", "skip_mrr10"];

fn metric(report: &MetricsReport, name: &str) -> Option<f64> {
    match name {
        "hr1" => Some(report.hr1),
        "hr5" => Some(report.hr5),
        "hr10" => Some(report.hr10),
        "hr20" => Some(report.hr20),
        "map10" => Some(report.map10),
        "skip_mrr10" => report.skip_mrr10,
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricDelta {
    pub metric: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// Relative change of `b` over `a`, rounded to an integer percent.
    pub delta_percent: Option<i64>,
    /// Higher is better except for skip ranking, where lower is better.
    pub improvement: bool,
}

impl MetricDelta {
    /// `+9%`, `-15%`, `0%`, or `n/a`.
    pub fn label(&self) -> String {
        match self.delta_percent {
            None => "n/a".into(),
            Some(0) => "0%".into(),
            Some(p) if p > 0 => format!("+{p}%"),
            Some(p) => format!("{p}%"),
        }
    }
}

pub fn relative_percent(a: f64, b: f64) -> Option<i64> {
    if a == 0.0 || !a.is_finite() || !b.is_finite() {
        return None;
    }
    let p = ((b - a) / a * 100.0).round() as i64;
    Some(p)
}

/// Per-metric relative change of `b` over `a`.
pub fn compare(a: &MetricsFile, b: &MetricsFile) -> Result<Vec<MetricDelta>> {
    if a.dataset_hash != b.dataset_hash {
        return Err(Error::Integrity(format!(
            "metrics come from different datasets ({} vs {})",
            a.dataset_hash, b.dataset_hash
        )));
    }
    Ok(COMPARED_METRICS
        .iter()
        .map(|&name| {
            let (va, vb) = (metric(&a.report, name), metric(&b.report, name));
            let delta_percent = match (va, vb) {
                (Some(x), Some(y)) => relative_percent(x, y),
                _ => None,
            };
            let lower_is_better = name == "skip_mrr10";
            let improvement = match delta_percent {
                Some(p) if lower_is_better => p < 0,
                Some(p) => p > 0,
                None => false,
            };
            MetricDelta {
                metric: name.to_string(),
                a: va,
                b: vb,
                delta_percent,
                improvement,
            }
        })
        .collect())
}

pub fn render_comparison(a: &MetricsFile, b: &MetricsFile, deltas: &[MetricDelta]) -> String {
    let mut out = String::new();
    writeln!(out, "A: {}  B: {}  dataset {}", a.model, b.model, a.dataset_hash).unwrap();
    writeln!(out, "{:<12}{:>10}{:>10}{:>8}", "metric", "A", "B", "delta").unwrap();
    for d in deltas {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        let mark = if d.improvement { "  improvement" } else { "" };
        writeln!(
            out,
            "{:<12}{:>10}{:>10}{:>8}{mark}",
            d.metric,
            fmt(d.a),
            fmt(d.b),
            d.label()
        )
        .unwrap();
    }
    out
}

/// Table with one row per metrics file; every row after the first carries its
/// relative change over the first as `(+X%)`.
pub fn render_report(files: &[MetricsFile]) -> Result<String> {
    let Some(base) = files.first() else {
        return Err(Error::Data("no metrics files to report".into()));
    };
    let mut out = String::new();
    write!(out, "{:<24}", "model").unwrap();
    for m in COMPARED_METRICS {
        write!(out, "{m:>18}").unwrap();
    }
    out.push('\n');
    for f in files {
        let deltas = compare(base, f)?;
        write!(out, "{:<24}", f.model).unwrap();
        for d in &deltas {
            let cell = match d.b {
                None => "-".to_string(),
                Some(v) if std::ptr::eq(f, base) => format!("{v:.3}"),
                Some(v) => format!("{v:.3} ({})", d.label()),
            };
            write!(out, "{cell:>18}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}
