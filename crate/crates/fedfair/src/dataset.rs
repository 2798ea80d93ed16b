//! Tabular datasets: the unit held by clients, the server's synthetic set,
//! and evaluation splits.
//!
//! Features are stored row-major as an `n x p` matrix. Labels are real values
//! in `[0, 1]`; hard labels are `0.0`/`1.0`, soft labels appear on synthetic
//! data. The optional group vector carries one sensitive-attribute id per row.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Feature matrix, labels, and optional sensitive-group ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub features: Array2<f64>,
    pub labels: Vec<f64>,
    pub group: Option<Vec<usize>>,
}

impl TabularDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<f64>,
        group: Option<Vec<usize>>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "TabularDataset labels",
                expected: features.nrows(),
                actual: labels.len(),
            });
        }
        if let Some(g) = &group {
            if g.len() != labels.len() {
                return Err(Error::DimensionMismatch {
                    context: "TabularDataset group",
                    expected: labels.len(),
                    actual: g.len(),
                });
            }
        }
        Ok(Self {
            features,
            labels,
            group,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    /// Dataset consisting of the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let features = self.features.select(Axis(0), rows);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        let group = self
            .group
            .as_ref()
            .map(|g| rows.iter().map(|&r| g[r]).collect());
        Self {
            features,
            labels,
            group,
        }
    }

    /// Concatenate datasets row-wise. All parts must agree on feature count
    /// and on whether groups are present.
    pub fn concat(parts: &[&TabularDataset]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyBatch("concat"))?;
        let p = first.num_features();
        let has_group = first.group.is_some();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut group = if has_group { Some(Vec::new()) } else { None };
        for part in parts {
            if part.num_features() != p {
                return Err(Error::DimensionMismatch {
                    context: "concat features",
                    expected: p,
                    actual: part.num_features(),
                });
            }
            features.extend(part.features.iter().copied());
            labels.extend_from_slice(&part.labels);
            match (&mut group, &part.group) {
                (Some(acc), Some(g)) => acc.extend_from_slice(g),
                (None, None) => {}
                _ => {
                    return Err(Error::InvalidConfig(
                        "cannot concat datasets with and without groups".into(),
                    ))
                }
            }
        }
        let n = labels.len();
        let features = Array2::from_shape_vec((n, p), features)
            .expect("row-major concat preserves shape");
        Ok(Self {
            features,
            labels,
            group,
        })
    }

    /// Deterministic shuffled split into a train part of `n - holdout` rows
    /// and a holdout part.
    pub fn split_holdout(&self, holdout: usize, seed: u64) -> Result<(Self, Self)> {
        if holdout >= self.len() {
            return Err(Error::InvalidConfig(format!(
                "holdout {} must be smaller than dataset size {}",
                holdout,
                self.len()
            )));
        }
        let mut rows: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rows.shuffle(&mut rng);
        let (train_rows, hold_rows) = rows.split_at(self.len() - holdout);
        Ok((self.select_rows(train_rows), self.select_rows(hold_rows)))
    }
}
