//! Metrics and run comparison: AUC-ROC, AUC-PR (average precision),
//! graph-recovery scores, and the modified-vs-original loss-mode
//! comparison.
//!
//! The AUC implementations are exact: AUC-ROC uses the Mann-Whitney
//! rank statistic with tied scores counted one half, AUC-PR is plain
//! average precision over the descending-score ordering with stable
//! tie handling. Both are integer-and-half-integer arithmetic until a
//! single final division, so they can be compared bit-for-bit against
//! brute-force oracles.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::extract::RecoveredGraph;
use crate::kg::KnowledgeGraph;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("metric needs at least one sample")]
    Empty,
    #[error("labels must contain both classes")]
    SingleClass,
    #[error("average precision needs at least one positive label")]
    NoPositives,
    #[error("label {value} at index {index} is not 0 or 1")]
    BadLabel { value: u8, index: usize },
    #[error("score at index {index} is not finite")]
    BadScore { index: usize },
    #[error("report rows must have strictly increasing steps (row {row})")]
    StepsNotIncreasing { row: usize },
    #[error("row {row}: metric {name} = {value} outside [0, 1]")]
    MetricOutOfRange {
        row: usize,
        name: &'static str,
        value: f64,
    },
    #[error("row {row}: loss is not finite")]
    LossNotFinite { row: usize },
    #[error("reports have different step grids")]
    MismatchedSteps,
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn validate_inputs(scores: &[f64], labels: &[u8]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    for (index, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(EvalError::BadScore { index });
        }
    }
    for (index, &l) in labels.iter().enumerate() {
        if l > 1 {
            return Err(EvalError::BadLabel { value: l, index });
        }
    }
    Ok(())
}

/// Area under the ROC curve via the Mann-Whitney statistic.
///
/// Equals the probability that a random positive outscores a random
/// negative, with ties counted one half. Computed from average ranks,
/// so any strictly monotone transform of the scores leaves the result
/// unchanged. Both classes must be present.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    validate_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    // Ascending by score; ties get the average of the ranks they span,
    // which is always a whole or half integer.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average rank.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: the sum over positives of precision at each
/// positive's rank, divided by the number of positives. Ranking is by
/// descending score with ties kept in input order (stable sort).
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    validate_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut true_positives = 0u64;
    let mut precision_sum = 0.0f64;
    for (k, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            true_positives += 1;
            precision_sum += true_positives as f64 / (k + 1) as f64;
        }
    }
    Ok(precision_sum / n_pos as f64)
}

/// Edge-level agreement between a recovered graph and the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryScore {
    pub edge_precision: f64,
    pub edge_recall: f64,
    pub edge_f1: f64,
    /// Among recovered (head, tail) pairs that exist in the truth, the
    /// fraction whose relation label matches a truth relation for that
    /// pair. 0 when no pairs intersect.
    pub relation_accuracy: f64,
    pub true_edges: usize,
    pub recovered_edges: usize,
    pub intersection: usize,
}

/// Scores a recovered graph against the truth over ordered
/// `(head, tail)` pairs, ignoring triples with match below
/// `match_floor`. Precision and recall are 0 by convention when their
/// denominators are empty; F1 is 0 when both are 0.
pub fn score_recovery(
    truth: &KnowledgeGraph,
    recovered: &RecoveredGraph,
    match_floor: f64,
) -> RecoveryScore {
    let true_pairs = truth.edge_set();
    let kept: Vec<_> = recovered
        .entries()
        .filter(|e| e.score >= match_floor)
        .collect();
    let mut intersection = 0usize;
    let mut relation_hits = 0usize;
    for entry in &kept {
        let pair = (entry.triple.head.clone(), entry.triple.tail.clone());
        if true_pairs.contains(&pair) {
            intersection += 1;
            let label = entry.triple.relation_label();
            if truth
                .relations_of(&entry.triple.head, &entry.triple.tail)
                .iter()
                .any(|r| *r == label)
            {
                relation_hits += 1;
            }
        }
    }
    let precision = if kept.is_empty() {
        0.0
    } else {
        intersection as f64 / kept.len() as f64
    };
    let recall = if true_pairs.is_empty() {
        0.0
    } else {
        intersection as f64 / true_pairs.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let relation_accuracy = if intersection == 0 {
        0.0
    } else {
        relation_hits as f64 / intersection as f64
    };
    RecoveryScore {
        edge_precision: precision,
        edge_recall: recall,
        edge_f1: f1,
        relation_accuracy,
        true_edges: true_pairs.len(),
        recovered_edges: kept.len(),
        intersection,
    }
}

/// One evaluation row of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub step: usize,
    pub auc_pr: f64,
    pub auc_roc: f64,
    pub loss: f64,
}

/// A training run's evaluation trajectory plus identifying metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTripReport {
    pub rows: Vec<ReportRow>,
    pub loss_mode: String,
    pub lambda: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl RoundTripReport {
    /// Validates row invariants: strictly increasing steps, metrics in
    /// `[0, 1]`, finite loss.
    pub fn new(
        rows: Vec<ReportRow>,
        loss_mode: &str,
        lambda: f64,
        seed: u64,
        config_hash: &str,
    ) -> Result<Self, EvalError> {
        for (i, row) in rows.iter().enumerate() {
            if i > 0 && rows[i - 1].step >= row.step {
                return Err(EvalError::StepsNotIncreasing { row: i });
            }
            for (name, value) in [("auc_pr", row.auc_pr), ("auc_roc", row.auc_roc)] {
                if !(0.0..=1.0).contains(&value) {
                    return Err(EvalError::MetricOutOfRange {
                        row: i,
                        name,
                        value,
                    });
                }
            }
            if !row.loss.is_finite() {
                return Err(EvalError::LossNotFinite { row: i });
            }
        }
        Ok(RoundTripReport {
            rows,
            loss_mode: loss_mode.to_string(),
            lambda,
            seed,
            config_hash: config_hash.to_string(),
        })
    }

    pub fn mean_loss(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.loss))
    }

    pub fn mean_auc_roc(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.auc_roc))
    }

    pub fn mean_auc_pr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.auc_pr))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Outcome of comparing a modified-loss run against an original-loss
/// run on the same step grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonSummary {
    /// Per-step `modified loss / original loss`.
    pub loss_ratio_per_step: Vec<(usize, f64)>,
    pub mean_loss_modified: f64,
    pub mean_loss_original: f64,
    pub mean_loss_ratio: f64,
    pub auc_roc_delta: f64,
    pub auc_pr_delta: f64,
    /// Mean modified loss < 10% of mean original loss.
    pub finding_loss_collapse: bool,
    /// Mean modified AUC-ROC below mean original AUC-ROC.
    pub finding_auc_drop: bool,
}

/// Compares the two loss modes' reports. The findings mirror the two
/// qualitative claims the harness exists to check; they are reported,
/// not asserted, because their truth depends on the data.
pub fn compare_runs(
    modified: &RoundTripReport,
    original: &RoundTripReport,
) -> Result<ComparisonSummary, EvalError> {
    let steps_m: Vec<usize> = modified.rows.iter().map(|r| r.step).collect();
    let steps_o: Vec<usize> = original.rows.iter().map(|r| r.step).collect();
    if steps_m != steps_o || steps_m.is_empty() {
        return Err(EvalError::MismatchedSteps);
    }
    let loss_ratio_per_step = modified
        .rows
        .iter()
        .zip(&original.rows)
        .map(|(m, o)| (m.step, m.loss / o.loss))
        .collect();
    let mean_loss_modified = modified.mean_loss();
    let mean_loss_original = original.mean_loss();
    let auc_roc_delta = modified.mean_auc_roc() - original.mean_auc_roc();
    let auc_pr_delta = modified.mean_auc_pr() - original.mean_auc_pr();
    Ok(ComparisonSummary {
        loss_ratio_per_step,
        mean_loss_modified,
        mean_loss_original,
        mean_loss_ratio: mean_loss_modified / mean_loss_original,
        auc_roc_delta,
        auc_pr_delta,
        finding_loss_collapse: mean_loss_modified < 0.10 * mean_loss_original,
        finding_auc_drop: auc_roc_delta < 0.0,
    })
}

/// Writes report rows as CSV with the fixed header
/// `steps,auc_pr,auc_roc,loss`.
pub fn write_report_csv(report: &RoundTripReport, path: &Path) -> Result<(), EvalError> {
    let io_err = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    writeln!(out, "steps,auc_pr,auc_roc,loss").map_err(io_err)?;
    for row in &report.rows {
        writeln!(out, "{},{},{},{}", row.step, row.auc_pr, row.auc_roc, row.loss)
            .map_err(io_err)?;
    }
    fs::write(path, out).map_err(io_err)
}

/// Reads rows written by [`write_report_csv`]. Metadata is not stored
/// in the CSV, so the caller supplies it.
pub fn read_report_csv(
    path: &Path,
    loss_mode: &str,
    lambda: f64,
    seed: u64,
    config_hash: &str,
) -> Result<RoundTripReport, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let parse_err = |line: usize, message: &str| EvalError::Parse {
        path: path.display().to_string(),
        line,
        message: message.to_string(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "steps,auc_pr,auc_roc,loss")) => {}
        Some((_, other)) => return Err(parse_err(1, &format!("unexpected header {other:?}"))),
        None => return Err(parse_err(1, "empty file")),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(idx + 1, "expected 4 comma-separated fields"));
        }
        let step = fields[0]
            .parse::<usize>()
            .map_err(|e| parse_err(idx + 1, &e.to_string()))?;
        let mut reals = [0.0f64; 3];
        for (slot, field) in reals.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse::<f64>()
                .map_err(|e| parse_err(idx + 1, &e.to_string()))?;
        }
        rows.push(ReportRow {
            step,
            auc_pr: reals[0],
            auc_roc: reals[1],
            loss: reals[2],
        });
    }
    RoundTripReport::new(rows, loss_mode, lambda, seed, config_hash)
}

/// Writes the comparison as a flat `key=value` text file.
pub fn write_comparison(summary: &ComparisonSummary, path: &Path) -> Result<(), EvalError> {
    let io_err = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    writeln!(out, "mean_loss_modified={}", summary.mean_loss_modified).map_err(io_err)?;
    writeln!(out, "mean_loss_original={}", summary.mean_loss_original).map_err(io_err)?;
    writeln!(out, "mean_loss_ratio={}", summary.mean_loss_ratio).map_err(io_err)?;
    writeln!(out, "auc_roc_delta={}", summary.auc_roc_delta).map_err(io_err)?;
    writeln!(out, "auc_pr_delta={}", summary.auc_pr_delta).map_err(io_err)?;
    writeln!(out, "finding_loss_collapse={}", summary.finding_loss_collapse).map_err(io_err)?;
    writeln!(out, "finding_auc_drop={}", summary.finding_auc_drop).map_err(io_err)?;
    for (step, ratio) in &summary.loss_ratio_per_step {
        writeln!(out, "loss_ratio_step_{step}={ratio}").map_err(io_err)?;
    }
    fs::write(path, out).map_err(io_err)
}
