//! Server-side synthetic data: checkpoint collection and trajectory-matching
//! condensation.
//!
//! The server keeps the global models of the first `s` rounds. Condensation
//! optimizes a small synthetic dataset so that a few gradient-descent steps
//! from one saved checkpoint land close to a later one; the resulting set
//! stands in for the clients' pooled data when computing calibrated updates.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TabularDataset;
use crate::error::{Error, Result};
use crate::model::{sgd_steps, unrolled_grad_wrt_data, ModelParams, ModelShape};

/// Ordered store of `(round, global model)` pairs. Append-only while filling,
/// frozen before condensation reads it.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    entries: Vec<(usize, ModelParams)>,
    frozen: bool,
}

impl CheckpointStore {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            frozen: false,
        }
    }

    /// Append a checkpoint. Rounds must be strictly increasing and all
    /// params must share one shape.
    pub fn append(&mut self, round: usize, params: ModelParams) -> Result<()> {
        if self.frozen {
            return Err(Error::InvalidConfig(
                "checkpoint store is frozen".into(),
            ));
        }
        if let Some((last_round, first)) = self
            .entries
            .last()
            .map(|(r, _)| *r)
            .zip(self.entries.first().map(|(_, p)| p))
        {
            if round <= last_round {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint rounds must increase: {round} after {last_round}"
                )));
            }
            if first.shape != params.shape {
                return Err(Error::InvalidConfig(
                    "checkpoint shape differs from the stored ones".into(),
                ));
            }
        }
        self.entries.push((round, params));
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rounds(&self) -> Vec<usize> {
        self.entries.iter().map(|(r, _)| *r).collect()
    }

    pub fn get(&self, round: usize) -> Result<&ModelParams> {
        self.entries
            .iter()
            .find(|(r, _)| *r == round)
            .map(|(_, p)| p)
            .ok_or(Error::MissingCheckpoint(round))
    }

    /// Start rounds `tau` for which both `tau` and `tau + gap` are stored.
    pub fn valid_starts(&self, gap: usize) -> Vec<usize> {
        self.entries
            .iter()
            .map(|(r, _)| *r)
            .filter(|r| self.get(r + gap).is_ok())
            .collect()
    }
}

impl Default for CheckpointStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Learnable synthetic set: a feature matrix and soft labels in `[0, 1]`.
/// The sensitive attribute, when present, lives inside the features at
/// `group_col`; it stays continuous during optimization and is rounded to a
/// group id only when the set is consumed as a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub features: Array2<f64>,
    pub labels: Vec<f64>,
    pub group_col: Option<usize>,
    pub num_groups: usize,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// View as a tabular dataset: continuous features as-is, group column
    /// rounded to the nearest valid id.
    pub fn as_dataset(&self) -> TabularDataset {
        let group = self.group_col.map(|col| {
            self.features
                .column(col)
                .iter()
                .map(|&v| {
                    let max = (self.num_groups - 1) as f64;
                    v.round().clamp(0.0, max) as usize
                })
                .collect()
        });
        TabularDataset::new(self.features.clone(), self.labels.clone(), group)
            .expect("rows stay aligned")
    }

    /// Write as CSV: header `f0..f{p-1},group,label`, '.' decimals, one row
    /// per sample. The group field holds the rounded id (empty when the set
    /// carries no group column).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let io = |e| Error::io(path.display().to_string(), e);
        let p = self.features.ncols();
        let header: Vec<String> = (0..p)
            .map(|j| format!("f{j}"))
            .chain(["group".into(), "label".into()])
            .collect();
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        let dataset = self.as_dataset();
        for i in 0..self.len() {
            let mut fields: Vec<String> = self
                .features
                .row(i)
                .iter()
                .map(|v| format!("{v}"))
                .collect();
            fields.push(
                dataset
                    .group
                    .as_ref()
                    .map(|g| g[i].to_string())
                    .unwrap_or_default(),
            );
            fields.push(format!("{}", self.labels[i]));
            writeln!(out, "{}", fields.join(",")).map_err(io)?;
        }
        Ok(())
    }

    /// Read a CSV produced by [`write_csv`].
    pub fn read_csv(path: &Path, group_col: Option<usize>, num_groups: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let bad = |message: String| Error::Csv {
            path: path.display().to_string(),
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[cols.len() - 2] != "group" || cols[cols.len() - 1] != "label" {
            return Err(bad(format!("unexpected header `{header}`")));
        }
        let p = cols.len() - 2;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != p + 2 {
                return Err(bad(format!(
                    "line {}: {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    p + 2
                )));
            }
            for f in &fields[..p] {
                features.push(
                    f.parse::<f64>()
                        .map_err(|e| bad(format!("line {}: {e}", lineno + 2)))?,
                );
            }
            labels.push(
                fields[p + 1]
                    .parse::<f64>()
                    .map_err(|e| bad(format!("line {}: {e}", lineno + 2)))?,
            );
        }
        let n = labels.len();
        let features = Array2::from_shape_vec((n, p), features)
            .map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            features,
            labels,
            group_col,
            num_groups,
        })
    }
}

/// Knobs of the condensation loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensationConfig {
    /// Synthetic sample count.
    pub samples: usize,
    /// Outer optimization iterations.
    pub iterations: usize,
    /// Inner SGD steps per trajectory segment.
    pub inner_steps: usize,
    /// Learning rate of the inner SGD steps.
    pub inner_lr: f64,
    /// Learning rate applied to the synthetic features and labels.
    pub data_lr: f64,
    /// RNG seed for initialization and segment sampling.
    pub seed: u64,
    /// Architecture of the server network trained on the synthetic set
    /// (distinct from the clients' model).
    pub server_shape: ModelShape,
    /// Per-feature `(low, high)` ranges used to scale the initialization.
    /// `None` leaves the standard-normal draw untouched.
    #[serde(default)]
    pub feature_ranges: Option<Vec<(f64, f64)>>,
    /// Which feature column carries the sensitive attribute, if any.
    #[serde(default)]
    pub group_col: Option<usize>,
    /// Number of discrete group ids for rounding the group column.
    #[serde(default = "default_num_groups")]
    pub num_groups: usize,
}

fn default_num_groups() -> usize {
    2
}

impl CondensationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidConfig("condensation needs samples >= 1".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::InvalidConfig(
                "condensation needs inner_steps >= 1".into(),
            ));
        }
        if let Some(ranges) = &self.feature_ranges {
            if ranges.len() != self.server_shape.input_dim {
                return Err(Error::InvalidConfig(format!(
                    "{} feature ranges for input_dim {}",
                    ranges.len(),
                    self.server_shape.input_dim
                )));
            }
        }
        if let Some(col) = self.group_col {
            if col >= self.server_shape.input_dim {
                return Err(Error::InvalidConfig(format!(
                    "group_col {col} outside input_dim {}",
                    self.server_shape.input_dim
                )));
            }
        }
        Ok(())
    }

    fn initial_set(&self, rng: &mut ChaCha8Rng) -> SyntheticDataset {
        let p = self.server_shape.input_dim;
        let mut features: Array2<f64> = Array2::from_shape_fn((self.samples, p), |_| {
            // standard normal via Box-Muller-free sampling from rand_distr
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
        });
        if let Some(ranges) = &self.feature_ranges {
            for (j, &(lo, hi)) in ranges.iter().enumerate() {
                let center = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo);
                for v in features.column_mut(j) {
                    // map N(0,1) into the configured range, clipping the tails
                    *v = (center + *v * half / 2.0).clamp(lo, hi);
                }
            }
        }
        if let Some(col) = self.group_col {
            // seed the group column with alternating ids so every group is
            // populated; it stays learnable as a continuous relaxation
            for (i, v) in features.column_mut(col).iter_mut().enumerate() {
                *v = (i % self.num_groups) as f64;
            }
        }
        SyntheticDataset {
            features,
            labels: vec![0.5; self.samples],
            group_col: self.group_col,
            num_groups: self.num_groups,
        }
    }
}

/// Trajectory-matching objective for one segment: train the server network
/// from the checkpoint at `tau` on the synthetic set for `inner_steps`
/// full-batch steps and return the squared distance to the checkpoint at
/// `tau + inner_steps`.
pub fn trajectory_loss(
    store: &CheckpointStore,
    syn: &SyntheticDataset,
    cfg: &CondensationConfig,
    tau: usize,
) -> Result<f64> {
    let start = store.get(tau)?;
    let target = store.get(tau + cfg.inner_steps)?;
    let batch = syn.as_dataset();
    let end = sgd_steps(start, &batch, cfg.inner_lr, cfg.inner_steps)?;
    Ok(end.sq_distance(target))
}

/// Mean trajectory loss over every valid segment start; diagnostic used to
/// judge condensation progress.
pub fn mean_trajectory_loss(
    store: &CheckpointStore,
    syn: &SyntheticDataset,
    cfg: &CondensationConfig,
) -> Result<f64> {
    let starts = store.valid_starts(cfg.inner_steps);
    if starts.is_empty() {
        return Err(Error::InvalidConfig(
            "no checkpoint pair matches inner_steps".into(),
        ));
    }
    let mut total = 0.0;
    for tau in &starts {
        total += trajectory_loss(store, syn, cfg, *tau)?;
    }
    Ok(total / starts.len() as f64)
}

/// Build the synthetic dataset by iterative gradient descent on the
/// trajectory-matching objective. Deterministic given the config seed.
pub fn datasyn(store: &CheckpointStore, cfg: &CondensationConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    if !store.is_frozen() {
        return Err(Error::InvalidConfig(
            "checkpoint store must be frozen before condensation".into(),
        ));
    }
    let starts = store.valid_starts(cfg.inner_steps);
    if starts.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "store holds no checkpoint pair {} rounds apart",
            cfg.inner_steps
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut syn = cfg.initial_set(&mut rng);

    for iteration in 0..cfg.iterations {
        let tau = starts[rng.gen_range(0..starts.len())];
        let start = store.get(tau)?;
        let target = store.get(tau + cfg.inner_steps)?;
        let batch = TabularDataset::new(syn.features.clone(), syn.labels.clone(), None)
            .expect("synthetic rows stay aligned");
        let grad = unrolled_grad_wrt_data(start, &batch, cfg.inner_lr, cfg.inner_steps, target)
            .map_err(|e| match e {
                Error::NonFinite { context, .. } => Error::NonFinite {
                    context: format!("datasyn iteration {iteration}: {context}"),
                    index: iteration,
                },
                other => other,
            })?;
        if !grad.objective.is_finite()
            || grad.features.iter().any(|v| !v.is_finite())
            || grad.labels.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite {
                context: "datasyn objective or gradients".into(),
                index: iteration,
            });
        }
        syn.features.zip_mut_with(&grad.features, |x, &g| {
            *x -= cfg.data_lr * g;
        });
        if let Some(col) = cfg.group_col {
            // continuous relaxation of the group ids, kept inside the valid
            // range so rounding on consumption always yields a real group
            let max = (cfg.num_groups - 1) as f64;
            for v in syn.features.column_mut(col) {
                *v = v.clamp(0.0, max);
            }
        }
        for (y, g) in syn.labels.iter_mut().zip(&grad.labels) {
            *y = (*y - cfg.data_lr * g).clamp(0.0, 1.0);
        }
    }
    Ok(syn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{loss_and_grad, ModelShape};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn store_with(params: Vec<(usize, ModelParams)>) -> CheckpointStore {
        let mut store = CheckpointStore::new();
        for (r, p) in params {
            store.append(r, p).unwrap();
        }
        store.freeze();
        store
    }

    fn one_d_cfg(inner_lr: f64) -> CondensationConfig {
        CondensationConfig {
            samples: 1,
            iterations: 0,
            inner_steps: 1,
            inner_lr,
            data_lr: 0.1,
            seed: 0,
            server_shape: ModelShape::logistic(1),
            feature_ranges: None,
            group_col: None,
            num_groups: 2,
        }
    }

    #[test]
    fn rounds_must_increase() {
        let mut store = CheckpointStore::new();
        let p = ModelParams::zeros(ModelShape::logistic(1));
        store.append(1, p.clone()).unwrap();
        assert!(store.append(1, p).is_err());
    }

    #[test]
    fn frozen_store_rejects_appends() {
        let mut store = CheckpointStore::new();
        store
            .append(1, ModelParams::zeros(ModelShape::logistic(1)))
            .unwrap();
        store.freeze();
        assert!(store
            .append(2, ModelParams::zeros(ModelShape::logistic(1)))
            .is_err());
    }

    #[test]
    fn trajectory_loss_zero_when_step_reproduces_target() {
        let start = ModelParams::from_values(ModelShape::logistic(1), vec![0.1, -0.2]).unwrap();
        let syn = SyntheticDataset {
            features: array![[0.7], [-1.1]],
            labels: vec![1.0, 0.0],
            group_col: None,
            num_groups: 2,
        };
        let cfg = CondensationConfig {
            samples: 2,
            ..one_d_cfg(0.4)
        };
        let target = sgd_steps(&start, &syn.as_dataset(), 0.4, 1).unwrap();
        let store = store_with(vec![(1, start), (2, target)]);
        let loss = trajectory_loss(&store, &syn, &cfg, 1).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-24);
    }

    #[test]
    fn trajectory_loss_zero_lr_is_checkpoint_distance() {
        let a = ModelParams::from_values(ModelShape::logistic(1), vec![0.0, 0.0]).unwrap();
        let b = ModelParams::from_values(ModelShape::logistic(1), vec![0.3, 0.4]).unwrap();
        let store = store_with(vec![(1, a.clone()), (2, b.clone())]);
        let syn = SyntheticDataset {
            features: array![[1.0]],
            labels: vec![1.0],
            group_col: None,
            num_groups: 2,
        };
        let loss = trajectory_loss(&store, &syn, &one_d_cfg(0.0), 1).unwrap();
        assert_abs_diff_eq!(loss, a.sq_distance(&b), epsilon = 1e-15);
    }

    #[test]
    fn trajectory_loss_hand_arithmetic() {
        // From w = (0, 0): p = 0.5, grad_w = (0.5 - y) x, grad_b = 0.5 - y.
        // With x = 0.4, y = 1, lr = 1 the step moves w by +0.2 and b by +0.5.
        // Target (0.3, 0.5) leaves (0.2 - 0.3)^2 = 0.01.
        let start = ModelParams::zeros(ModelShape::logistic(1));
        let target =
            ModelParams::from_values(ModelShape::logistic(1), vec![0.3, 0.5]).unwrap();
        let syn = SyntheticDataset {
            features: array![[0.4]],
            labels: vec![1.0],
            group_col: None,
            num_groups: 2,
        };
        let store = store_with(vec![(1, start), (2, target)]);
        let loss = trajectory_loss(&store, &syn, &one_d_cfg(1.0), 1).unwrap();
        assert_abs_diff_eq!(loss, 0.01, epsilon = 1e-12);
    }

    #[test]
    fn missing_checkpoint_names_the_round() {
        let store = store_with(vec![(1, ModelParams::zeros(ModelShape::logistic(1)))]);
        let syn = SyntheticDataset {
            features: array![[1.0]],
            labels: vec![1.0],
            group_col: None,
            num_groups: 2,
        };
        let err = trajectory_loss(&store, &syn, &one_d_cfg(0.1), 5).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(5)));
    }

    fn training_checkpoints(rounds: usize) -> (CheckpointStore, TabularDataset) {
        // two well-separated clusters so the trajectory carries real signal
        let data = TabularDataset::new(
            array![
                [1.5, 1.0],
                [2.0, 1.5],
                [1.0, 2.0],
                [-1.5, -1.0],
                [-2.0, -1.5],
                [-1.0, -2.0]
            ],
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            None,
        )
        .unwrap();
        let mut store = CheckpointStore::new();
        let mut params = ModelParams::zeros(ModelShape::logistic(2));
        for round in 1..=rounds {
            let (_, grad) = loss_and_grad(&params, &data).unwrap();
            params = params.step(&grad, 0.5).unwrap();
            store.append(round, params.clone()).unwrap();
        }
        store.freeze();
        (store, data)
    }

    fn cluster_cfg() -> CondensationConfig {
        CondensationConfig {
            samples: 8,
            iterations: 150,
            inner_steps: 2,
            inner_lr: 0.5,
            data_lr: 0.3,
            seed: 11,
            server_shape: ModelShape::logistic(2),
            feature_ranges: None,
            group_col: None,
            num_groups: 2,
        }
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let (store, _) = training_checkpoints(6);
        let mut cfg = cluster_cfg();
        cfg.iterations = 0;
        let a = datasyn(&store, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = cfg.initial_set(&mut rng);
        assert_eq!(a, init);
    }

    #[test]
    fn datasyn_halves_mean_trajectory_loss() {
        let (store, _) = training_checkpoints(10);
        let cfg = cluster_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = cfg.initial_set(&mut rng);
        let before = mean_trajectory_loss(&store, &init, &cfg).unwrap();
        let syn = datasyn(&store, &cfg).unwrap();
        let after = mean_trajectory_loss(&store, &syn, &cfg).unwrap();
        assert!(
            after <= 0.5 * before,
            "condensation did not halve the objective: {before} -> {after}"
        );
    }

    #[test]
    fn datasyn_is_deterministic() {
        let (store, _) = training_checkpoints(8);
        let mut cfg = cluster_cfg();
        cfg.iterations = 30;
        let a = datasyn(&store, &cfg).unwrap();
        let b = datasyn(&store, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_stay_clamped() {
        let (store, _) = training_checkpoints(8);
        let mut cfg = cluster_cfg();
        cfg.data_lr = 5.0; // deliberately aggressive
        cfg.iterations = 50;
        if let Ok(syn) = datasyn(&store, &cfg) {
            assert!(syn.labels.iter().all(|&y| (0.0..=1.0).contains(&y)));
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("syn.csv");
        let syn = SyntheticDataset {
            features: array![[0.25, 1.0], [-0.75, 0.0]],
            labels: vec![0.5, 1.0],
            group_col: Some(1),
            num_groups: 2,
        };
        syn.write_csv(&path).unwrap();
        let back = SyntheticDataset::read_csv(&path, Some(1), 2).unwrap();
        assert_eq!(back, syn);
    }
}
