//! Labelled embedding sets.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::noise::NoiseSource;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub embeddings: DenseMatrix,
    /// One byte per row, each 0 or 1.
    pub labels: Vec<u8>,
    pub domain_id: u32,
    /// Ground-truth causal coordinates, when known.
    pub ground_truth: Option<Vec<usize>>,
}

pub type EmbeddingBatch = LabeledBatch;

impl LabeledBatch {
    pub fn new(embeddings: DenseMatrix, labels: Vec<u8>, domain_id: u32) -> Result<Self> {
        let batch = Self {
            embeddings,
            labels,
            domain_id,
            ground_truth: None,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn with_ground_truth(mut self, dims: Vec<usize>) -> Result<Self> {
        self.ground_truth = Some(dims);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.embeddings.rows() {
            return Err(Error::dim("labels", self.embeddings.rows(), self.labels.len()));
        }
        if let Some(bad) = self.labels.iter().find(|&&y| y > 1) {
            return Err(Error::Config(format!("label {bad} is not in {{0, 1}}")));
        }
        if let Some(gt) = &self.ground_truth {
            if let Some(&i) = gt.iter().find(|&&i| i >= self.dim()) {
                return Err(Error::Config(format!(
                    "ground-truth dim {i} out of range for d = {}",
                    self.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| y as f64).collect()
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            embeddings: self.embeddings.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            domain_id: self.domain_id,
            ground_truth: self.ground_truth.clone(),
        })
    }

    /// Seeded random split into `(train, held_out)` with
    /// `round(len * fraction)` held-out rows.
    pub fn split(&self, fraction: f64, noise: &mut NoiseSource) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("split fraction must lie in [0, 1], got {fraction}")));
        }
        let perm = noise.permutation(self.len());
        let held = (self.len() as f64 * fraction).round() as usize;
        let (h, t) = perm.split_at(held);
        Ok((self.select(t)?, self.select(h)?))
    }

    /// Share of the more frequent label.
    pub fn majority_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let pos = self.labels.iter().filter(|&&y| y == 1).count();
        pos.max(self.len() - pos) as f64 / self.len() as f64
    }
}
