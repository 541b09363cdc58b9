//! Accuracy, rank-based average precision and mask recovery.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_inputs(what: &str, scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim(what, scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(Error::EmptyDataset(what.into()));
    }
    if let Some(y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Config(format!("{what}: label {y} is not in {{0, 1}}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

/// Scores at or above `threshold` are positive predictions.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_inputs("confusion", scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Fraction of rows where `(score >= threshold) == label`.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    Ok(confusion(scores, labels, threshold)?.accuracy())
}

/// Non-interpolated AP: mean over positives (in rank order) of precision at
/// that rank. Ranking is by descending score, ties kept in input order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs("average_precision", scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("average precision of NaN scores".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // `sort_by` is stable.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskRecovery {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    /// Set when the truth set is empty, making recall vacuous.
    pub vacuous: bool,
}

/// Compares `{i : mask[i] >= threshold}` against the `truth` index set.
pub fn mask_recovery(mask_row: &[f64], truth: &[usize], threshold: f64) -> Result<MaskRecovery> {
    let d = mask_row.len();
    let mut in_truth = vec![false; d];
    for &i in truth {
        if i >= d {
            return Err(Error::dim("mask_recovery truth index", format!("< {d}"), i));
        }
        in_truth[i] = true;
    }
    let truth_n = in_truth.iter().filter(|&&t| t).count();
    let mut selected = 0usize;
    let mut inter = 0usize;
    for (i, &m) in mask_row.iter().enumerate() {
        if m >= threshold {
            selected += 1;
            if in_truth[i] {
                inter += 1;
            }
        }
    }
    let union = selected + truth_n - inter;
    let precision = match (selected, truth_n) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => inter as f64 / selected as f64,
    };
    let recall = if truth_n == 0 { 1.0 } else { inter as f64 / truth_n as f64 };
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok(MaskRecovery {
        precision,
        recall,
        iou,
        vacuous: truth_n == 0,
    })
}
