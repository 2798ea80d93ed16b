//! Differentiable binary classifiers: logistic regression and one-hidden-layer
//! MLPs with exact analytic gradients.
//!
//! Every other part of the crate consumes models only through this module. All
//! operations are pure functions of their inputs; nothing here mutates shared
//! state, so values can be used freely across threads.
//!
//! Parameters are kept as one flat vector. The layout is, per layer: the
//! weight matrix row-major (`in_dim x out_dim`), then the bias (`out_dim`).
//! The final layer always produces a single logit.

mod tape;
mod unrolled;

pub use unrolled::{unrolled_grad_wrt_data, UnrolledGrad};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TabularDataset;
use crate::error::{Error, Result};

/// Probabilities are clamped to this bound before taking logs so that
/// cross-entropy stays finite.
pub const PROB_CLAMP: f64 = 1e-12;

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation output `a = act(z)`.
    /// For relu the kink at 0 takes derivative 0.
    fn deriv_from_output(&self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Architecture descriptor. Empty `hidden_dims` means logistic regression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl ModelShape {
    pub fn logistic(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: Vec::new(),
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden_dims,
            activation,
        }
    }

    /// `(in_dim, out_dim)` of every layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, 1));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum()
    }
}

/// Flat parameter vector of a classifier plus its architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Self {
        let n = shape.param_count();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(shape: ModelShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.param_count() {
            return Err(Error::DimensionMismatch {
                context: "ModelParams values",
                expected: shape.param_count(),
                actual: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    /// Xavier-uniform weights, zero biases, seedable.
    pub fn init_xavier(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(shape.param_count());
        for (i, o) in shape.layer_dims() {
            let bound = (6.0 / (i + o) as f64).sqrt();
            for _ in 0..i * o {
                values.push(rng.gen_range(-bound..bound));
            }
            values.extend(std::iter::repeat(0.0).take(o));
        }
        Self { shape, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `self - lr * update`, same shape.
    pub fn step(&self, update: &Update, lr: f64) -> Result<Self> {
        if update.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "ModelParams step",
                expected: self.dim(),
                actual: update.dim(),
            });
        }
        let values = self
            .values
            .iter()
            .zip(&update.values)
            .map(|(w, g)| w - lr * g)
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            values,
        })
    }

    pub fn sq_distance(&self, other: &ModelParams) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn layers(&self) -> Vec<(Array2<f64>, Array1<f64>)> {
        let mut layers = Vec::new();
        let mut offset = 0;
        for (i, o) in self.shape.layer_dims() {
            let w = Array2::from_shape_vec((i, o), self.values[offset..offset + i * o].to_vec())
                .expect("layout matches layer dims");
            offset += i * o;
            let b = Array1::from_vec(self.values[offset..offset + o].to_vec());
            offset += o;
            layers.push((w, b));
        }
        layers
    }
}

/// Flat gradient-shaped vector, same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Update {
    pub values: Vec<f64>,
}

impl Update {
    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    /// `self + c * other`.
    pub fn add_scaled(&self, other: &Update, c: f64) -> Result<Self> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "Update add",
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + c * b)
                .collect(),
        })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Update) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

struct Forward {
    /// Post-activation outputs per hidden layer.
    hidden: Vec<Array2<f64>>,
    /// Final probabilities, one per row.
    probs: Array1<f64>,
}

fn forward(params: &ModelParams, features: &Array2<f64>) -> Result<Forward> {
    if features.ncols() != params.shape.input_dim {
        return Err(Error::DimensionMismatch {
            context: "feature width",
            expected: params.shape.input_dim,
            actual: features.ncols(),
        });
    }
    let layers = params.layers();
    let mut hidden = Vec::with_capacity(layers.len() - 1);
    let mut activ = features.clone();
    for (idx, (w, b)) in layers.iter().enumerate() {
        let mut z = activ.dot(w);
        z += b;
        if idx + 1 < layers.len() {
            z.mapv_inplace(|v| params.shape.activation.apply(v));
            hidden.push(z.clone());
            activ = z;
        } else {
            let probs = z.index_axis(Axis(1), 0).mapv(sigmoid);
            return Ok(Forward { hidden, probs });
        }
    }
    unreachable!("layer list is never empty")
}

/// Predicted positive-class probability per row, strictly inside `(0, 1)` up
/// to floating clamp.
///
/// ```
/// use fedfair::model::{predict_prob, ModelParams, ModelShape};
/// use ndarray::array;
///
/// let w = ModelParams::zeros(ModelShape::logistic(2));
/// let p = predict_prob(&w, &array![[3.0, -1.0]]).unwrap();
/// assert_eq!(p, vec![0.5]); // zero logit
/// ```
pub fn predict_prob(params: &ModelParams, features: &Array2<f64>) -> Result<Vec<f64>> {
    Ok(forward(params, features)?.probs.to_vec())
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

/// Elementwise binary cross-entropy of the model's predictions against the
/// batch labels. Probabilities are clamped before the log, so the result is
/// always finite and non-negative.
pub fn per_sample_loss(params: &ModelParams, batch: &TabularDataset) -> Result<Vec<f64>> {
    let fwd = forward(params, &batch.features)?;
    Ok(fwd
        .probs
        .iter()
        .zip(&batch.labels)
        .map(|(&p, &y)| bce(p, y))
        .collect())
}

/// Gradient of `sum_i weights[i] * loss_i` with respect to the parameters,
/// by analytic backprop. Also returns the weighted loss value.
///
/// `loss_and_grad` and the fairness surrogate gradients are both thin
/// wrappers over this.
pub fn weighted_loss_grad(
    params: &ModelParams,
    batch: &TabularDataset,
    weights: &[f64],
) -> Result<(f64, Update)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyBatch("weighted_loss_grad"));
    }
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            context: "per-sample weights",
            expected: n,
            actual: weights.len(),
        });
    }
    let fwd = forward(params, &batch.features)?;
    let loss: f64 = fwd
        .probs
        .iter()
        .zip(&batch.labels)
        .zip(weights)
        .map(|((&p, &y), &c)| c * bce(p, y))
        .sum();

    let layers = params.layers();
    // dL/dlogit for BCE composed with sigmoid is (p - y), scaled per sample.
    let mut delta = Array2::from_shape_fn((n, 1), |(i, _)| {
        weights[i] * (fwd.probs[i] - batch.labels[i])
    });

    let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(layers.len());
    for idx in (0..layers.len()).rev() {
        let input = if idx == 0 {
            &batch.features
        } else {
            &fwd.hidden[idx - 1]
        };
        let gw = input.t().dot(&delta);
        let gb = delta.sum_axis(Axis(0));
        grads.push((gw, gb));
        if idx > 0 {
            let mut da = delta.dot(&layers[idx].0.t());
            let a = &fwd.hidden[idx - 1];
            da.zip_mut_with(a, |d, &av| {
                *d *= params.shape.activation.deriv_from_output(av)
            });
            delta = da;
        }
    }
    grads.reverse();

    let mut values = Vec::with_capacity(params.dim());
    for (gw, gb) in grads {
        values.extend(gw.iter().copied());
        values.extend(gb.iter().copied());
    }
    Ok((loss, Update::from_values(values)))
}

/// Mean loss over the batch and its exact gradient with respect to `params`.
pub fn loss_and_grad(params: &ModelParams, batch: &TabularDataset) -> Result<(f64, Update)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyBatch("loss_and_grad"));
    }
    let weights = vec![1.0 / n as f64; n];
    weighted_loss_grad(params, batch, &weights)
}

/// Fraction of rows whose thresholded prediction matches the (rounded) label.
pub fn accuracy(params: &ModelParams, batch: &TabularDataset, threshold: f64) -> Result<f64> {
    let probs = predict_prob(params, &batch.features)?;
    if probs.is_empty() {
        return Err(Error::EmptyBatch("accuracy"));
    }
    let correct = probs
        .iter()
        .zip(&batch.labels)
        .filter(|(&p, &y)| (p >= threshold) == (y >= 0.5))
        .count();
    Ok(correct as f64 / probs.len() as f64)
}

/// `steps` full-batch gradient-descent steps from `params`. Deterministic
/// given its inputs.
pub fn sgd_steps(
    params: &ModelParams,
    batch: &TabularDataset,
    lr: f64,
    steps: usize,
) -> Result<ModelParams> {
    let mut current = params.clone();
    for _ in 0..steps {
        let (_, grad) = loss_and_grad(&current, batch)?;
        current = current.step(&grad, lr)?;
    }
    Ok(current)
}

/// Central finite differences of a scalar function, one coordinate at a time.
/// Test oracle for every analytic gradient in the crate.
pub fn finite_difference_grad<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad.push((hi - lo) / (2.0 * step));
    }
    grad
}

/// Elementwise gradient comparison: relative error for large entries,
/// absolute for entries near zero.
pub fn max_grad_error(analytic: &[f64], reference: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| {
            if r.abs() < 1e-8 {
                (a - r).abs()
            } else {
                (a - r).abs() / r.abs()
            }
        })
        .fold(0.0, f64::max)
    }

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn logistic_params(values: Vec<f64>) -> ModelParams {
        let dim = values.len() - 1;
        ModelParams::from_values(ModelShape::logistic(dim), values).unwrap()
    }

    #[test]
    fn zero_weights_predict_half() {
        let w = ModelParams::zeros(ModelShape::logistic(3));
        let p = predict_prob(&w, &array![[1.0, -2.0, 5.0], [0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn orthogonal_input_predicts_half() {
        // w = [1, 0], bias 0, x = [0, 7]
        let w = logistic_params(vec![1.0, 0.0, 0.0]);
        let p = predict_prob(&w, &array![[0.0, 7.0]]).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn sigmoid_of_two() {
        // standalone math check: 1 / (1 + e^-2)
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        let w = logistic_params(vec![1.0, 0.0]);
        let p = predict_prob(&w, &array![[2.0]]).unwrap();
        assert_abs_diff_eq!(p[0], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.880797, epsilon = 1e-6);
    }

    #[test]
    fn loss_maximum_entropy() {
        let w = ModelParams::zeros(ModelShape::logistic(1));
        let batch =
            TabularDataset::new(array![[3.0]], vec![1.0], None).unwrap();
        // zero weights give p = 0.5 regardless of x
        let loss = per_sample_loss(&w, &batch).unwrap();
        assert_abs_diff_eq!(loss[0], std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn loss_perfect_prediction_tends_to_zero() {
        // y = 0 with a hugely negative logit: p -> 0, loss -> 0
        let w = logistic_params(vec![-50.0, 0.0]);
        let batch = TabularDataset::new(array![[1.0]], vec![0.0], None).unwrap();
        let loss = per_sample_loss(&w, &batch).unwrap();
        assert!(loss[0] < 1e-12, "loss {} should vanish", loss[0]);
    }

    #[test]
    fn loss_at_sigmoid_two() {
        // y = 1, p = sigmoid(2): loss = ln(1 + e^-2), evaluated standalone
        let expected = (1.0 + (-2.0f64).exp()).ln();
        let w = logistic_params(vec![1.0, 0.0]);
        let batch = TabularDataset::new(array![[2.0]], vec![1.0], None).unwrap();
        let loss = per_sample_loss(&w, &batch).unwrap();
        assert_abs_diff_eq!(loss[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(loss[0], 0.126928, epsilon = 1e-6);
    }

    #[test]
    fn mirrored_batch_gradient_by_hand() {
        // w = 0 gives p = 1/2 for both samples; with labels (1, 0) the
        // per-sample deltas are -1/4 and +1/4, so
        //   grad = -1/4 * [1, -2, 1] + 1/4 * [-1, 2, 1] = [-1/2, 1, 0]
        let w = ModelParams::zeros(ModelShape::logistic(2));
        let batch = TabularDataset::new(
            array![[1.0, -2.0], [-1.0, 2.0]],
            vec![1.0, 0.0],
            None,
        )
        .unwrap();
        let (_, grad) = loss_and_grad(&w, &batch).unwrap();
        assert_abs_diff_eq!(grad.values[0], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(grad.values[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(grad.values[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn single_sample_logistic_gradient_closed_form() {
        let w = logistic_params(vec![0.3, -0.7, 0.1]);
        let x = [1.5, -0.4];
        let y = 1.0;
        let batch =
            TabularDataset::new(array![[x[0], x[1]]], vec![y], None).unwrap();
        let (_, grad) = loss_and_grad(&w, &batch).unwrap();
        let z = 0.3 * x[0] - 0.7 * x[1] + 0.1;
        let p = sigmoid(z);
        // closed form: grad = (p - y) * [x, 1]
        assert_abs_diff_eq!(grad.values[0], (p - y) * x[0], epsilon = 1e-12);
        assert_abs_diff_eq!(grad.values[1], (p - y) * x[1], epsilon = 1e-12);
        assert_abs_diff_eq!(grad.values[2], p - y, epsilon = 1e-12);
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, p: usize) -> TabularDataset {
        let features = Array2::from_shape_fn((n, p), |_| rng.gen_range(-2.0..2.0));
        let labels = (0..n)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        TabularDataset::new(features, labels, None).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = if seed % 2 == 0 {
                ModelShape::logistic(3)
            } else {
                let act = if seed % 4 == 1 {
                    Activation::Sigmoid
                } else {
                    Activation::Relu
                };
                ModelShape::mlp(3, vec![4], act)
            };
            let params = ModelParams::init_xavier(shape.clone(), seed + 100);
            let batch = random_batch(&mut rng, 6, 3);
            let (_, grad) = loss_and_grad(&params, &batch).unwrap();
            let fd = finite_difference_grad(
                |v| {
                    let p =
                        ModelParams::from_values(shape.clone(), v.to_vec()).unwrap();
                    loss_and_grad(&p, &batch).unwrap().0
                },
                &params.values,
                1e-5,
            );
            let err = max_grad_error(&grad.values, &fd);
            assert!(err <= 1e-4, "seed {seed}: gradient error {err}");
        }
    }

    #[test]
    fn sgd_single_step_is_definition() {
        let params = ModelParams::init_xavier(ModelShape::logistic(2), 1);
        let batch = TabularDataset::new(
            array![[0.2, -1.0], [1.4, 0.5]],
            vec![0.0, 1.0],
            None,
        )
        .unwrap();
        let (_, grad) = loss_and_grad(&params, &batch).unwrap();
        let manual = params.step(&grad, 0.3).unwrap();
        let stepped = sgd_steps(&params, &batch, 0.3, 1).unwrap();
        assert_eq!(manual, stepped);
    }

    #[test]
    fn sgd_zero_lr_is_noop() {
        let params = ModelParams::init_xavier(ModelShape::mlp(2, vec![3], Activation::Relu), 2);
        let batch =
            TabularDataset::new(array![[1.0, 2.0]], vec![1.0], None).unwrap();
        let after = sgd_steps(&params, &batch, 0.0, 5).unwrap();
        assert_eq!(params, after);
    }

    #[test]
    fn sgd_monotone_on_convex_problem() {
        // strictly convex 1-d logistic problem
        let batch = TabularDataset::new(
            array![[1.0], [2.0], [-1.0], [0.5]],
            vec![1.0, 1.0, 0.0, 0.0],
            None,
        )
        .unwrap();
        let mut params = ModelParams::zeros(ModelShape::logistic(1));
        let mut prev = loss_and_grad(&params, &batch).unwrap().0;
        for _ in 0..200 {
            params = sgd_steps(&params, &batch, 0.5, 1).unwrap();
            let loss = loss_and_grad(&params, &batch).unwrap().0;
            assert!(loss <= prev + 1e-12, "loss increased: {prev} -> {loss}");
            prev = loss;
        }
    }

    #[test]
    fn sgd_is_bitwise_deterministic() {
        let params = ModelParams::init_xavier(ModelShape::mlp(3, vec![5], Activation::Sigmoid), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let batch = random_batch(&mut rng, 8, 3);
        let a = sgd_steps(&params, &batch, 0.1, 20).unwrap();
        let b = sgd_steps(&params, &batch, 0.1, 20).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn feature_width_mismatch_is_an_error() {
        let w = ModelParams::zeros(ModelShape::logistic(2));
        let res = predict_prob(&w, &array![[1.0, 2.0, 3.0]]);
        assert!(matches!(res, Err(Error::DimensionMismatch { .. })));
    }
}
