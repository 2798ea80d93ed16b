//! K-nearest-neighbor graph on z-scored features, used by the consistency
//! metric and its surrogate.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Per-row list of the `k` nearest other rows by Euclidean distance on
/// standardized features. Immutable after construction.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    k: usize,
    neighbors: Vec<Vec<usize>>,
}

impl NeighborGraph {
    /// Build from a feature matrix. Requires `1 <= k < n`.
    pub fn build(features: &Array2<f64>, k: usize) -> Result<Self> {
        let n = features.nrows();
        if k == 0 || k >= n {
            return Err(Error::InvalidConfig(format!(
                "neighbor count k = {k} must satisfy 1 <= k < n = {n}"
            )));
        }
        let p = features.ncols();

        // z-score each column; constant columns contribute no distance
        let mut standardized = features.clone();
        for j in 0..p {
            let col = features.column(j);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            let scale = if std > 1e-12 { 1.0 / std } else { 0.0 };
            for i in 0..n {
                standardized[[i, j]] = (features[[i, j]] - mean) * scale;
            }
        }

        let mut neighbors = Vec::with_capacity(n);
        let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
        for i in 0..n {
            dists.clear();
            let row_i = standardized.row(i);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d: f64 = row_i
                    .iter()
                    .zip(standardized.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                dists.push((d, j));
            }
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            neighbors.push(dists[..k].iter().map(|&(_, j)| j).collect());
        }
        Ok(Self { k, neighbors })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub(crate) fn check_rows(&self, n: usize) -> Result<()> {
        if self.neighbors.len() != n {
            return Err(Error::DimensionMismatch {
                context: "neighbor graph rows",
                expected: n,
                actual: self.neighbors.len(),
            });
        }
        Ok(())
    }
}
