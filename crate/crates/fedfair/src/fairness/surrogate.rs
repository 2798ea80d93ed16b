//! Differentiable surrogate fairness losses and their analytic gradients.
//!
//! Each surrogate is a sum (mean, for consistency) of absolute differences of
//! mean per-sample cross-entropy losses over the index sets of the matching
//! hard metric. That makes them piecewise-linear in the per-sample losses:
//! the gradient with respect to the parameters is a per-sample-weighted loss
//! gradient, with weights determined by the sign of each absolute-value term.
//! At an exact kink (difference 0) the subgradient sign is taken as 0.

use crate::dataset::TabularDataset;
use crate::error::{Error, Result};
use crate::model::{per_sample_loss, weighted_loss_grad, ModelParams, Update};

use super::{FairnessMetricKind, GroupIndex, NeighborGraph};

fn mean_over(rows: &[usize], losses: &[f64]) -> f64 {
    rows.iter().map(|&r| losses[r]).sum::<f64>() / rows.len() as f64
}

fn kink_sign(diff: f64) -> f64 {
    if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Surrogate value plus the per-sample weight vector whose weighted loss
/// gradient equals the surrogate gradient.
fn loss_and_weights(
    kind: FairnessMetricKind,
    losses: &[f64],
    data: &TabularDataset,
    neighbors: Option<&NeighborGraph>,
) -> Result<(f64, Vec<f64>)> {
    let n = data.len();
    let mut weights = vec![0.0; n];
    let mut total = 0.0;

    match kind {
        FairnessMetricKind::Eo => {
            let index = GroupIndex::build(data)?;
            let groups = index.groups();
            let mut terms = 0usize;
            for y in 0..2 {
                for (a, &h) in groups.iter().enumerate() {
                    for &k in &groups[a + 1..] {
                        let cell_h = index.rows_group_label(h, y);
                        let cell_k = index.rows_group_label(k, y);
                        if cell_h.is_empty() || cell_k.is_empty() {
                            continue;
                        }
                        let diff = mean_over(cell_h, losses) - mean_over(cell_k, losses);
                        total += diff.abs();
                        let sign = kink_sign(diff);
                        for &r in cell_h {
                            weights[r] += sign / cell_h.len() as f64;
                        }
                        for &r in cell_k {
                            weights[r] -= sign / cell_k.len() as f64;
                        }
                        terms += 1;
                    }
                }
            }
            if terms == 0 {
                return Err(Error::NoSurrogateSignal("eo"));
            }
        }
        FairnessMetricKind::Dp => {
            let index = GroupIndex::build(data)?;
            let groups = index.groups();
            if groups.len() < 2 {
                return Err(Error::NoSurrogateSignal("dp"));
            }
            for (a, &h) in groups.iter().enumerate() {
                for &k in &groups[a + 1..] {
                    let rows_h = index.rows_group(h);
                    let rows_k = index.rows_group(k);
                    let diff = mean_over(rows_h, losses) - mean_over(rows_k, losses);
                    total += diff.abs();
                    let sign = kink_sign(diff);
                    for &r in rows_h {
                        weights[r] += sign / rows_h.len() as f64;
                    }
                    for &r in rows_k {
                        weights[r] -= sign / rows_k.len() as f64;
                    }
                }
            }
        }
        FairnessMetricKind::Cal => {
            let index = GroupIndex::build(data)?;
            let positives = index.rows_label(1);
            if positives.is_empty() {
                return Err(Error::NoSurrogateSignal("cal"));
            }
            let overall = mean_over(positives, losses);
            let mut terms = 0usize;
            for &h in index.groups() {
                let cell = index.rows_group_label(h, 1);
                if cell.is_empty() {
                    continue;
                }
                let diff = overall - mean_over(cell, losses);
                total += diff.abs();
                let sign = kink_sign(diff);
                for &r in positives {
                    weights[r] += sign / positives.len() as f64;
                }
                for &r in cell {
                    weights[r] -= sign / cell.len() as f64;
                }
                terms += 1;
            }
            if terms == 0 {
                return Err(Error::NoSurrogateSignal("cal"));
            }
        }
        FairnessMetricKind::Con => {
            let graph = neighbors.ok_or(Error::MissingNeighbors)?;
            graph.check_rows(n)?;
            let k = graph.k() as f64;
            let scale = 1.0 / n as f64;
            for (z, nbrs) in graph.neighbors().iter().enumerate() {
                let diff = losses[z] - mean_over(nbrs, losses);
                total += scale * diff.abs();
                let sign = kink_sign(diff);
                weights[z] += scale * sign;
                for &q in nbrs {
                    weights[q] -= scale * sign / k;
                }
            }
        }
    }

    Ok((total, weights))
}

/// Differentiable surrogate fairness loss `F_kind(params, data)`.
///
/// ```
/// use fedfair::fairness::{surrogate_loss, FairnessMetricKind};
/// use fedfair::model::{ModelParams, ModelShape};
/// use fedfair::TabularDataset;
/// use ndarray::array;
///
/// // identical rows in both groups: the loss gap is exactly zero
/// let data = TabularDataset::new(
///     array![[1.0], [1.0]],
///     vec![1.0, 1.0],
///     Some(vec![0, 1]),
/// ).unwrap();
/// let w = ModelParams::init_xavier(ModelShape::logistic(1), 3);
/// let f = surrogate_loss(FairnessMetricKind::Dp, &w, &data, None).unwrap();
/// assert_eq!(f, 0.0);
/// ```
pub fn surrogate_loss(
    kind: FairnessMetricKind,
    params: &ModelParams,
    data: &TabularDataset,
    neighbors: Option<&NeighborGraph>,
) -> Result<f64> {
    let losses = per_sample_loss(params, data)?;
    Ok(loss_and_weights(kind, &losses, data, neighbors)?.0)
}

/// Exact subgradient of [`surrogate_loss`] with respect to the parameters.
/// This is the calibrated update `g0` of the round loop.
pub fn surrogate_grad(
    kind: FairnessMetricKind,
    params: &ModelParams,
    data: &TabularDataset,
    neighbors: Option<&NeighborGraph>,
) -> Result<Update> {
    let losses = per_sample_loss(params, data)?;
    let (_, weights) = loss_and_weights(kind, &losses, data, neighbors)?;
    let (_, grad) = weighted_loss_grad(params, data, &weights)?;
    Ok(grad)
}
