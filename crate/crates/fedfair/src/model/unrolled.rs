//! Exact gradients of the trajectory-matching objective with respect to the
//! training data, by reverse-mode differentiation through unrolled full-batch
//! gradient-descent steps.

use ndarray::{Array2, Axis};

use super::tape::{NodeId, Tape};
use super::{Activation, ModelParams};
use crate::dataset::TabularDataset;
use crate::error::{Error, Result};

/// Result of differentiating `|| w_after_steps - target ||^2` with respect to
/// the batch that drives the steps.
#[derive(Debug, Clone)]
pub struct UnrolledGrad {
    /// Objective value at the current data.
    pub objective: f64,
    /// Gradient with respect to every feature entry, same shape as the batch.
    pub features: Array2<f64>,
    /// Gradient with respect to every (soft) label.
    pub labels: Vec<f64>,
}

struct LayerNodes {
    weight: NodeId,
    bias: NodeId,
}

/// Gradient of `|| sgd_steps(start, batch, lr, steps) - target ||^2` with
/// respect to `batch` features and labels.
///
/// The per-step loss gradient is written out analytically as tape primitives,
/// so the reverse pass includes the second-order terms through each step.
pub fn unrolled_grad_wrt_data(
    start: &ModelParams,
    batch: &TabularDataset,
    lr: f64,
    steps: usize,
    target: &ModelParams,
) -> Result<UnrolledGrad> {
    if start.shape != target.shape {
        return Err(Error::DimensionMismatch {
            context: "unrolled target shape",
            expected: start.dim(),
            actual: target.dim(),
        });
    }
    if steps == 0 {
        return Err(Error::InvalidConfig("unrolling needs steps >= 1".into()));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch("unrolled_grad_wrt_data"));
    }
    if batch.num_features() != start.shape.input_dim {
        return Err(Error::DimensionMismatch {
            context: "unrolled feature width",
            expected: start.shape.input_dim,
            actual: batch.num_features(),
        });
    }

    let n = batch.len();
    let mut tape = Tape::new();
    let x = tape.input(batch.features.clone());
    let y = tape.input(Array2::from_shape_vec(
        (n, 1),
        batch.labels.clone(),
    )
    .expect("labels are n x 1"));

    let mut params: Vec<LayerNodes> = layer_inputs(&mut tape, start);
    let layer_count = params.len();
    let activation = start.shape.activation;

    for step in 0..steps {
        // forward, keeping pre-activations for the backward formulas
        let mut activations: Vec<NodeId> = vec![x];
        let mut pre_acts: Vec<NodeId> = Vec::with_capacity(layer_count - 1);
        for (l, layer) in params.iter().enumerate() {
            let prod = tape.matmul(*activations.last().unwrap(), layer.weight);
            let z = tape.add_row(prod, layer.bias);
            if l + 1 < layer_count {
                pre_acts.push(z);
                let a = match activation {
                    Activation::Relu => tape.relu(z),
                    Activation::Sigmoid => tape.sigmoid(z),
                };
                activations.push(a);
            } else {
                let p = tape.sigmoid(z);
                activations.push(p);
            }
        }

        // analytic mean-BCE gradient, expressed in tape primitives
        let probs = *activations.last().unwrap();
        let diff = tape.sub(probs, y);
        let mut delta = tape.scale(diff, 1.0 / n as f64);

        let mut new_params: Vec<Option<LayerNodes>> = (0..layer_count).map(|_| None).collect();
        for l in (0..layer_count).rev() {
            let input = activations[l];
            let input_t = tape.transpose(input);
            let gw = tape.matmul(input_t, delta);
            let gb = tape.sum_rows(delta);
            let gw_step = tape.scale(gw, lr);
            let gb_step = tape.scale(gb, lr);
            let weight = tape.sub(params[l].weight, gw_step);
            let bias = tape.sub(params[l].bias, gb_step);
            new_params[l] = Some(LayerNodes { weight, bias });
            if l > 0 {
                let w_t = tape.transpose(params[l].weight);
                let da = tape.matmul(delta, w_t);
                let deriv = match activation {
                    Activation::Relu => tape.step_mask(pre_acts[l - 1]),
                    Activation::Sigmoid => {
                        // sigma'(z) = a (1 - a), with a the saved activation
                        let a = activations[l];
                        let sq = tape.mul(a, a);
                        tape.sub(a, sq)
                    }
                };
                delta = tape.mul(da, deriv);
            }
        }
        params = new_params.into_iter().map(Option::unwrap).collect();

        for layer in &params {
            let finite = tape.value(layer.weight).iter().all(|v| v.is_finite())
                && tape.value(layer.bias).iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFinite {
                    context: "unrolled SGD parameters".into(),
                    index: step,
                });
            }
        }
    }

    // objective: squared distance to the target checkpoint
    let target_layers = layer_inputs(&mut tape, target);
    let mut objective: Option<NodeId> = None;
    for (current, goal) in params.iter().zip(&target_layers) {
        for (cur, tgt) in [(current.weight, goal.weight), (current.bias, goal.bias)] {
            let diff = tape.sub(cur, tgt);
            let sq = tape.sum_sq(diff);
            objective = Some(match objective {
                Some(acc) => tape.add(acc, sq),
                None => sq,
            });
        }
    }
    let objective = objective.expect("at least one layer");
    let value = tape.value(objective)[[0, 0]];

    let grads = tape.backward(objective);
    let zero_x = || Array2::zeros(batch.features.raw_dim());
    let features = grads[0].clone().unwrap_or_else(zero_x);
    let labels = grads[1]
        .clone()
        .map(|g| g.index_axis(Axis(1), 0).to_vec())
        .unwrap_or_else(|| vec![0.0; n]);

    Ok(UnrolledGrad {
        objective: value,
        features,
        labels,
    })
}

fn layer_inputs(tape: &mut Tape, params: &ModelParams) -> Vec<LayerNodes> {
    let mut nodes = Vec::new();
    let mut offset = 0;
    for (i, o) in params.shape.layer_dims() {
        let w = Array2::from_shape_vec((i, o), params.values[offset..offset + i * o].to_vec())
            .expect("layout matches layer dims");
        offset += i * o;
        let b = Array2::from_shape_vec((1, o), params.values[offset..offset + o].to_vec())
            .expect("bias is a row");
        offset += o;
        nodes.push(LayerNodes {
            weight: tape.input(w),
            bias: tape.input(b),
        });
    }
    nodes
}
