//! Aggregation rules over client updates, plus the random-noise calibrated
//! update baselines.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Update;

/// A generic aggregation rule mapping `n` client updates to one update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregatorKind {
    /// Weighted average with fixed non-negative weights summing to 1.
    /// An empty weight list is a config-level placeholder that callers
    /// resolve (e.g. proportional to client sizes) before aggregating.
    FedAvg {
        #[serde(default)]
        weights: Vec<f64>,
    },
    /// Coordinate-wise median; even counts average the two middle values.
    Median,
    /// Coordinate-wise mean after dropping the `trim` largest and `trim`
    /// smallest values per coordinate.
    TrimmedMean { trim: usize },
    /// Average of the `select` updates with the smallest Krum scores.
    MultiKrum { faulty: usize, select: usize },
}

impl AggregatorKind {
    /// Uniform FedAvg over `n` clients.
    pub fn fedavg_uniform(n: usize) -> Self {
        AggregatorKind::FedAvg {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::FedAvg { .. } => "fedavg",
            AggregatorKind::Median => "median",
            AggregatorKind::TrimmedMean { .. } => "trimmed_mean",
            AggregatorKind::MultiKrum { .. } => "multi_krum",
        }
    }
}

fn constraint(rule: &'static str, message: String) -> Error {
    Error::AggregationConstraint { rule, message }
}

/// Apply an aggregation rule to a non-empty list of same-dimension updates.
///
/// ```
/// use fedfair::aggregation::{aggregate, AggregatorKind};
/// use fedfair::model::Update;
///
/// let updates = [
///     Update::from_values(vec![1.0, 10.0]),
///     Update::from_values(vec![2.0, 20.0]),
///     Update::from_values(vec![9.0, -30.0]), // an outlier client
/// ];
/// let med = aggregate(&AggregatorKind::Median, &updates).unwrap();
/// assert_eq!(med.values, vec![2.0, 10.0]);
/// ```
pub fn aggregate(kind: &AggregatorKind, updates: &[Update]) -> Result<Update> {
    let n = updates.len();
    if n == 0 {
        return Err(Error::EmptyBatch("aggregate"));
    }
    let d = updates[0].dim();
    for u in updates {
        if u.dim() != d {
            return Err(Error::DimensionMismatch {
                context: "aggregate updates",
                expected: d,
                actual: u.dim(),
            });
        }
    }

    match kind {
        AggregatorKind::FedAvg { weights } => {
            if weights.len() != n {
                return Err(constraint(
                    "fedavg",
                    format!("{} weights for {} updates", weights.len(), n),
                ));
            }
            if weights.iter().any(|&w| w < 0.0) {
                return Err(constraint("fedavg", "negative weight".into()));
            }
            let total: f64 = weights.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(constraint(
                    "fedavg",
                    format!("weights sum to {total}, expected 1"),
                ));
            }
            let mut out = vec![0.0; d];
            for (u, &w) in updates.iter().zip(weights) {
                for (o, v) in out.iter_mut().zip(&u.values) {
                    *o += w * v;
                }
            }
            Ok(Update::from_values(out))
        }
        AggregatorKind::Median => {
            let mut out = Vec::with_capacity(d);
            let mut column = vec![0.0; n];
            for j in 0..d {
                for (i, u) in updates.iter().enumerate() {
                    column[i] = u.values[j];
                }
                column.sort_by(f64::total_cmp);
                let mid = n / 2;
                out.push(if n % 2 == 1 {
                    column[mid]
                } else {
                    0.5 * (column[mid - 1] + column[mid])
                });
            }
            Ok(Update::from_values(out))
        }
        AggregatorKind::TrimmedMean { trim } => {
            if 2 * trim >= n {
                return Err(constraint(
                    "trimmed_mean",
                    format!("trim {trim} leaves no values out of {n}"),
                ));
            }
            let keep = n - 2 * trim;
            let mut out = Vec::with_capacity(d);
            let mut column = vec![0.0; n];
            for j in 0..d {
                for (i, u) in updates.iter().enumerate() {
                    column[i] = u.values[j];
                }
                column.sort_by(f64::total_cmp);
                let sum: f64 = column[*trim..n - trim].iter().sum();
                out.push(sum / keep as f64);
            }
            Ok(Update::from_values(out))
        }
        AggregatorKind::MultiKrum { faulty, select } => {
            let f = *faulty;
            let m = *select;
            if n < f + 3 {
                return Err(constraint(
                    "multi_krum",
                    format!("need n - f - 2 >= 1, got n = {n}, f = {f}"),
                ));
            }
            if m == 0 || m > n - f {
                return Err(constraint(
                    "multi_krum",
                    format!("select must be in 1..=n-f, got {m} with n = {n}, f = {f}"),
                ));
            }
            // score_i = sum of squared distances to the n - f - 2 closest peers
            let closest = n - f - 2;
            let mut scores: Vec<(f64, usize)> = Vec::with_capacity(n);
            for (i, u) in updates.iter().enumerate() {
                let mut dists: Vec<f64> = updates
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, v)| {
                        u.values
                            .iter()
                            .zip(&v.values)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .collect();
                dists.sort_by(f64::total_cmp);
                scores.push((dists[..closest].iter().sum(), i));
            }
            // ties broken by lowest client index
            scores.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut out = vec![0.0; d];
            for &(_, i) in &scores[..m] {
                for (o, v) in out.iter_mut().zip(&updates[i].values) {
                    *o += v / m as f64;
                }
            }
            Ok(Update::from_values(out))
        }
    }
}

/// Noise-baseline calibrated updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian { sigma: f64 },
    Uniform { bound: f64 },
}

impl NoiseKind {
    /// Zero-mean Gaussian with the default standard deviation of 2.
    pub fn default_gaussian() -> Self {
        NoiseKind::Gaussian { sigma: 2.0 }
    }

    /// Uniform on the default interval [-2, 2].
    pub fn default_uniform() -> Self {
        NoiseKind::Uniform { bound: 2.0 }
    }
}

/// An i.i.d. random update of the given dimension.
pub fn noise_update<R: Rng>(kind: NoiseKind, dim: usize, rng: &mut R) -> Update {
    let values = match kind {
        NoiseKind::Gaussian { sigma } => {
            let normal = Normal::new(0.0, sigma.max(0.0)).expect("sigma is finite");
            (0..dim).map(|_| normal.sample(rng)).collect()
        }
        NoiseKind::Uniform { bound } => (0..dim).map(|_| rng.gen_range(-bound..=bound)).collect(),
    };
    Update::from_values(values)
}
