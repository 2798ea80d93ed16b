//! Group and individual fairness: hard evaluation metrics and their
//! differentiable surrogate losses.
//!
//! The hard metrics threshold predicted probabilities and report gaps in
//! prediction rates (lower is fairer). The surrogates replace thresholded
//! rates with mean per-sample cross-entropy over the same index sets, which
//! makes them differentiable in the model parameters almost everywhere; their
//! gradient is the calibrated update the server injects each round.

mod group_index;
mod neighbors;
mod surrogate;

pub use group_index::GroupIndex;
pub use neighbors::NeighborGraph;
pub use surrogate::{surrogate_grad, surrogate_loss};

use serde::{Deserialize, Serialize};

use crate::dataset::TabularDataset;
use crate::error::{Error, Result};
use crate::model::{predict_prob, ModelParams};

/// The four supported fairness notions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FairnessMetricKind {
    /// Equalized odds: thresholded positive-rate gaps conditioned on the label.
    Eo,
    /// Demographic parity: unconditional positive-rate gaps.
    Dp,
    /// Calibration: per-group precision among positive predictions vs overall.
    Cal,
    /// Consistency: agreement with nearest-neighbor predictions.
    Con,
}

impl FairnessMetricKind {
    pub const ALL: [FairnessMetricKind; 4] = [
        FairnessMetricKind::Eo,
        FairnessMetricKind::Dp,
        FairnessMetricKind::Cal,
        FairnessMetricKind::Con,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FairnessMetricKind::Eo => "eo",
            FairnessMetricKind::Dp => "dp",
            FairnessMetricKind::Cal => "cal",
            FairnessMetricKind::Con => "con",
        }
    }
}

/// Label bucket used for grouping: soft labels round at 0.5.
pub(crate) fn label_bucket(y: f64) -> usize {
    usize::from(y >= 0.5)
}

/// Hard bias score of a model on a dataset. `threshold` converts predicted
/// probabilities into 0/1 predictions; consistency additionally needs a
/// neighbor graph. Lower is fairer.
pub fn bias_score(
    kind: FairnessMetricKind,
    params: &ModelParams,
    data: &TabularDataset,
    threshold: f64,
    neighbors: Option<&NeighborGraph>,
) -> Result<f64> {
    let probs = predict_prob(params, &data.features)?;
    score_predictions(kind, &probs, data, threshold, neighbors)
}

/// Hard bias score computed from already-predicted probabilities. Split out
/// from [`bias_score`] so the metric definitions can be tested (and checked
/// against enumeration oracles) without a model in the loop.
///
/// ```
/// use fedfair::fairness::{score_predictions, FairnessMetricKind};
/// use fedfair::TabularDataset;
/// use ndarray::array;
///
/// // group 0 gets every positive prediction, group 1 none
/// let data = TabularDataset::new(
///     array![[0.0], [0.0], [1.0], [1.0]],
///     vec![1.0, 0.0, 1.0, 0.0],
///     Some(vec![0, 0, 1, 1]),
/// ).unwrap();
/// let probs = [0.9, 0.8, 0.2, 0.1];
/// let dp = score_predictions(FairnessMetricKind::Dp, &probs, &data, 0.5, None).unwrap();
/// assert_eq!(dp, 1.0); // maximally unfair positive-rate gap
/// ```
pub fn score_predictions(
    kind: FairnessMetricKind,
    probs: &[f64],
    data: &TabularDataset,
    threshold: f64,
    neighbors: Option<&NeighborGraph>,
) -> Result<f64> {
    if probs.len() != data.len() {
        return Err(Error::DimensionMismatch {
            context: "score_predictions probabilities",
            expected: data.len(),
            actual: probs.len(),
        });
    }
    let preds: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();

    match kind {
        FairnessMetricKind::Con => {
            let graph = neighbors.ok_or(Error::MissingNeighbors)?;
            graph.check_rows(data.len())?;
            let mut total = 0.0;
            for (i, nbrs) in graph.neighbors().iter().enumerate() {
                let own = f64::from(preds[i]);
                let mean: f64 = nbrs.iter().map(|&j| f64::from(preds[j])).sum::<f64>()
                    / nbrs.len() as f64;
                total += (own - mean).abs();
            }
            Ok(total / data.len() as f64)
        }
        FairnessMetricKind::Eo | FairnessMetricKind::Dp | FairnessMetricKind::Cal => {
            let index = GroupIndex::build(data)?;
            let groups = index.groups();
            if groups.len() < 2
                && matches!(kind, FairnessMetricKind::Eo | FairnessMetricKind::Dp)
            {
                return Err(Error::TooFewGroups {
                    metric: kind.name(),
                    found: groups.len(),
                });
            }
            let positive_rate = |rows: &[usize]| -> Option<f64> {
                if rows.is_empty() {
                    None
                } else {
                    Some(
                        rows.iter().filter(|&&r| preds[r]).count() as f64
                            / rows.len() as f64,
                    )
                }
            };
            match kind {
                FairnessMetricKind::Eo => {
                    // max over labels and group pairs; empty conditioning
                    // cells contribute no candidate
                    let mut best = 0.0f64;
                    for y in 0..2 {
                        let rates: Vec<f64> = groups
                            .iter()
                            .filter_map(|&h| positive_rate(index.rows_group_label(h, y)))
                            .collect();
                        for (a, ra) in rates.iter().enumerate() {
                            for rb in &rates[a + 1..] {
                                best = best.max((ra - rb).abs());
                            }
                        }
                    }
                    Ok(best)
                }
                FairnessMetricKind::Dp => {
                    let rates: Vec<f64> = groups
                        .iter()
                        .filter_map(|&h| positive_rate(index.rows_group(h)))
                        .collect();
                    let mut best = 0.0f64;
                    for (a, ra) in rates.iter().enumerate() {
                        for rb in &rates[a + 1..] {
                            best = best.max((ra - rb).abs());
                        }
                    }
                    Ok(best)
                }
                FairnessMetricKind::Cal => {
                    // precision among positive predictions, overall and per
                    // group; groups without positive predictions are skipped
                    let precision = |rows: Box<dyn Iterator<Item = usize> + '_>| -> Option<f64> {
                        let mut pos = 0usize;
                        let mut true_pos = 0usize;
                        for r in rows {
                            if preds[r] {
                                pos += 1;
                                if label_bucket(data.labels[r]) == 1 {
                                    true_pos += 1;
                                }
                            }
                        }
                        (pos > 0).then(|| true_pos as f64 / pos as f64)
                    };
                    let Some(overall) = precision(Box::new(0..data.len())) else {
                        return Ok(0.0);
                    };
                    let mut best = 0.0f64;
                    for &h in groups {
                        if let Some(p) =
                            precision(Box::new(index.rows_group(h).iter().copied()))
                        {
                            best = best.max((p - overall).abs());
                        }
                    }
                    Ok(best)
                }
                FairnessMetricKind::Con => unreachable!(),
            }
        }
    }
}
