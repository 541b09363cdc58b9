//! Training the four module configurations side by side.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{accuracy, DEFAULT_THRESHOLD};
use crate::synthgen::Benchmark;
use crate::trainer::{fit, predict, ModelBundle, TrainConfig, TrainHistory, Variant};

/// Recorded in every ablation report.
pub const MASKING_ONLY_NOTE: &str = "masking_only pins the mask to all ones and feeds the adversary a \
copy of E (z_nc would otherwise be identically zero)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub same_domain_accuracy: f64,
    pub shifted_accuracy: Vec<f64>,
    pub best_epoch: Option<usize>,
}

impl AblationRow {
    /// Unweighted mean over the shifted test sets.
    pub fn mean_shifted(&self) -> f64 {
        self.shifted_accuracy.iter().sum::<f64>() / self.shifted_accuracy.len().max(1) as f64
    }
}

/// Scores a trained bundle on the benchmark's test sets.
pub fn score_variant(bench: &Benchmark, variant: Variant, bundle: &ModelBundle, history: &TrainHistory) -> Result<AblationRow> {
    let acc = |b: &crate::dataset::LabeledBatch| accuracy(&predict(bundle, &b.embeddings)?, &b.labels, DEFAULT_THRESHOLD);
    Ok(AblationRow {
        variant,
        same_domain_accuracy: acc(&bench.test_same_domain)?,
        shifted_accuracy: bench.test_shifted.iter().map(acc).collect::<Result<_>>()?,
        best_epoch: history.best_epoch,
    })
}

/// Trains `variant` from `base` on the benchmark and scores it.
pub fn run_variant(bench: &Benchmark, base: &TrainConfig, variant: Variant) -> Result<(ModelBundle, AblationRow)> {
    let cfg = TrainConfig {
        variant,
        ..base.clone()
    };
    let (bundle, history) = fit(&bench.train, &bench.val, &cfg)?;
    let row = score_variant(bench, variant, &bundle, &history)?;
    Ok((bundle, row))
}

/// One row per variant, in [`Variant::ALL`] order.
pub fn ablate(bench: &Benchmark, base: &TrainConfig) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|&v| run_variant(bench, base, v).map(|(_, row)| row))
        .collect()
}

/// Full strictly best on mean shifted accuracy, and both single-module rows
/// strictly above the both-off baseline.
pub fn ordering_holds(rows: &[AblationRow]) -> bool {
    let get = |v: Variant| rows.iter().find(|r| r.variant == v).map(AblationRow::mean_shifted);
    let (Some(full), Some(fact), Some(mask), Some(off)) = (
        get(Variant::Full),
        get(Variant::FactorizationOnly),
        get(Variant::MaskingOnly),
        get(Variant::BothOff),
    ) else {
        return false;
    };
    full > fact && full > mask && full > off && fact > off && mask > off
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {MASKING_ONLY_NOTE}");
    let _ = writeln!(
        out,
        "{:<20}  {:>9}  {:>13}  {:>24}  {:>9}",
        "variant", "same-dom", "shifted-mean", "shifted (per domain)", "best-ep"
    );
    for r in rows {
        let per: Vec<String> = r.shifted_accuracy.iter().map(|a| format!("{a:.4}")).collect();
        let _ = writeln!(
            out,
            "{:<20}  {:>9.4}  {:>13.4}  {:>24}  {:>9}",
            r.variant.name(),
            r.same_domain_accuracy,
            r.mean_shifted(),
            per.join(" "),
            r.best_epoch.map_or_else(|| "-".into(), |e| e.to_string())
        );
    }
    out
}
