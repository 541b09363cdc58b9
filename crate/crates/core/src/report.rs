//! Per-dataset evaluation reports, rendered as TOML or as a text table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledBatch;
use crate::error::{Error, Result};
use crate::mask::mask_sparsity;
use crate::metrics::{average_precision, confusion, mask_recovery, Confusion};
use crate::synthgen::Benchmark;
use crate::trainer::{predict, ModelBundle, TrainConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub name: String,
    pub n: usize,
    pub accuracy: f64,
    /// Absent when the set has no positive labels.
    pub average_precision: Option<f64>,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: f64,
    /// Mean over rows where AP is defined.
    pub average_precision: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub mean_sparsity: f64,
    /// The truth set was empty, so recall is vacuous.
    pub vacuous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub threshold: f64,
    pub notes: Vec<String>,
    pub rows: Vec<DatasetRow>,
    pub aggregate: Aggregate,
    pub mask: Option<MaskMetrics>,
    pub config: Option<TrainConfig>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    pub fn new(rows: Vec<DatasetRow>, threshold: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset("report has no rows".into()));
        }
        let aggregate = Aggregate {
            accuracy: mean(rows.iter().map(|r| r.accuracy)).expect("rows is non-empty"),
            average_precision: mean(rows.iter().filter_map(|r| r.average_precision)),
        };
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            seed: None,
            threshold,
            notes: Vec::new(),
            rows,
            aggregate,
            mask: None,
            config: None,
        })
    }

    pub fn row(&self, name: &str) -> Option<&DatasetRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Io(format!("serialising report: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("parsing report: {e}")))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for note in &self.notes {
            let _ = writeln!(out, "# {note}");
        }
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(9);
        let _ = writeln!(out, "{:<width$}  {:>6}  {:>8}  {:>8}", "dataset", "n", "acc", "ap");
        let fmt_ap = |ap: Option<f64>| ap.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>8.4}  {:>8}",
                r.name,
                r.n,
                r.accuracy,
                fmt_ap(r.average_precision)
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>8.4}  {:>8}",
            "mean",
            "",
            self.aggregate.accuracy,
            fmt_ap(self.aggregate.average_precision)
        );
        if let Some(m) = &self.mask {
            let _ = writeln!(
                out,
                "mask: precision {:.4}  recall {:.4}  IoU {:.4}  mean sparsity {:.3}{}",
                m.precision,
                m.recall,
                m.iou,
                m.mean_sparsity,
                if m.vacuous { "  (empty truth set)" } else { "" }
            );
        }
        out
    }
}

/// Scores one labelled set with the bundle's deterministic prediction path.
pub fn evaluate_dataset(bundle: &ModelBundle, name: &str, data: &LabeledBatch, threshold: f64) -> Result<DatasetRow> {
    let scores = predict(bundle, &data.embeddings)?;
    let c = confusion(&scores, &data.labels, threshold)?;
    let ap = match average_precision(&scores, &data.labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(DatasetRow {
        name: name.to_string(),
        n: data.len(),
        accuracy: c.accuracy(),
        average_precision: ap,
        confusion: c,
    })
}

/// Mask recovery of the per-dimension mean deterministic mask over `data`.
pub fn mask_metrics(bundle: &ModelBundle, data: &LabeledBatch, truth: &[usize], threshold: f64) -> Result<MaskMetrics> {
    let mask = bundle.deterministic_mask(&data.embeddings)?;
    let r = mask_recovery(&mask.column_means(), truth, threshold)?;
    Ok(MaskMetrics {
        precision: r.precision,
        recall: r.recall,
        iou: r.iou,
        mean_sparsity: mask_sparsity(&mask),
        vacuous: r.vacuous,
    })
}

/// One row per test set of the benchmark, plus mask recovery against the
/// generating spec's ground truth (measured on the training set).
pub fn domain_shift_report(bench: &Benchmark, bundle: &ModelBundle, threshold: f64) -> Result<MetricsReport> {
    let rows = bench
        .test_sets()
        .into_iter()
        .map(|(name, b)| evaluate_dataset(bundle, &name, b, threshold))
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricsReport::new(rows, threshold)?;
    report.mask = Some(mask_metrics(bundle, &bench.train, &bench.spec.ground_truth(), threshold)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, acc: f64, ap: Option<f64>) -> DatasetRow {
        DatasetRow {
            name: name.into(),
            n: 10,
            accuracy: acc,
            average_precision: ap,
            confusion: Confusion::default(),
        }
    }

    #[test]
    fn aggregate_is_row_mean() {
        let r = MetricsReport::new(vec![row("a", 0.5, Some(0.25)), row("b", 1.0, None)], 0.5).unwrap();
        assert_eq!(r.aggregate.accuracy, 0.75);
        assert_eq!(r.aggregate.average_precision, Some(0.25));
        assert!(MetricsReport::new(vec![], 0.5).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut r = MetricsReport::new(vec![row("a", 0.5, Some(0.25)), row("b", 1.0, None)], 0.5).unwrap();
        r.seed = Some(7);
        r.notes.push("hello".into());
        r.mask = Some(MaskMetrics {
            precision: 1.0,
            recall: 0.5,
            iou: 0.5,
            mean_sparsity: 3.0,
            vacuous: false,
        });
        r.config = Some(TrainConfig::default());
        let text = r.to_toml().unwrap();
        assert!(text.contains("schema_version = 1"));
        assert_eq!(MetricsReport::from_toml(&text).unwrap(), r);
        assert!(r.to_table().contains("IoU 0.5000"));
    }
}
