//! JSON experiment configuration: parsing, field-precise validation, and
//! assembly into a runnable experiment.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatorKind;
use crate::condensation::CondensationConfig;
use crate::dataset::TabularDataset;
use crate::error::{Error, Result};
use crate::fairness::FairnessMetricKind;
use crate::federation::{
    partition, CalibratorKind, ClientState, DpNoiseConfig, Experiment, PartitionScheme,
    RoundPlan, Schedules,
};
use crate::model::{Activation, ModelShape};

use super::generator::{generate_biased_tabular, BiasedTabularSpec};
use super::idx::load_idx_with;

/// Where the task data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Generator(BiasedTabularSpec),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_digit_threshold")]
        digit_threshold: u8,
    },
}

fn default_digit_threshold() -> u8 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSettings {
    pub count: usize,
    pub batch_size: usize,
    #[serde(default = "default_partition")]
    pub partition: PartitionScheme,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub dp: Option<DpNoiseConfig>,
}

fn default_partition() -> PartitionScheme {
    PartitionScheme::Iid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

/// [`RoundPlan`] with config-level defaults: `checkpoint_rounds` falls back
/// to `total_rounds / 2`, the aggregator to size-proportional FedAvg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSettings {
    pub total_rounds: usize,
    #[serde(default)]
    pub checkpoint_rounds: Option<usize>,
    #[serde(default = "default_aggregator")]
    pub aggregator: AggregatorKind,
    pub metric: FairnessMetricKind,
    pub calibrator: CalibratorKind,
    #[serde(default = "default_neighbor_k")]
    pub neighbor_k: usize,
}

fn default_aggregator() -> AggregatorKind {
    AggregatorKind::FedAvg { weights: vec![] }
}

fn default_neighbor_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensationSettings {
    #[serde(default = "default_syn_samples")]
    pub samples: usize,
    pub iterations: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub data_lr: f64,
}

fn default_syn_samples() -> usize {
    1000
}

/// Top-level experiment description, one JSON document per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Fraction of rows held out for evaluation.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    pub clients: ClientSettings,
    pub model: ModelSettings,
    pub plan: PlanSettings,
    #[serde(default = "default_schedules")]
    pub schedules: Schedules,
    pub condensation: CondensationSettings,
    /// Master seed; partition, init, sampling, and noise seeds derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_neighbor_k")]
    pub eval_neighbor_k: usize,
}

fn default_eval_fraction() -> f64 {
    0.25
}

fn default_schedules() -> Schedules {
    Schedules::constant(0.1, 1.0)
}

fn default_threshold() -> f64 {
    0.5
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    /// Field-precise validation, run before any computation starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| {
            Err(Error::InvalidConfig(format!("{field}: {msg}")))
        };
        match &self.dataset {
            DatasetSpec::Generator(spec) => spec
                .validate()
                .map_err(|e| Error::InvalidConfig(format!("dataset: {e}")))?,
            DatasetSpec::Idx { images, labels, .. } => {
                if images.as_os_str().is_empty() || labels.as_os_str().is_empty() {
                    return bad("dataset", "idx paths must be non-empty".into());
                }
            }
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad(
                "eval_fraction",
                format!("must lie in (0, 1), got {}", self.eval_fraction),
            );
        }
        if self.clients.count == 0 {
            return bad("clients.count", "must be at least 1".into());
        }
        if self.clients.batch_size == 0 {
            return bad("clients.batch_size", "must be at least 1".into());
        }
        if self.clients.l2 < 0.0 {
            return bad("clients.l2", format!("must be >= 0, got {}", self.clients.l2));
        }
        if let Some(dp) = &self.clients.dp {
            dp.validate()
                .map_err(|e| Error::InvalidConfig(format!("clients.dp: {e}")))?;
        }
        if let PartitionScheme::LabelShard { labels_per_client } = self.clients.partition {
            if labels_per_client == 0 {
                return bad("clients.partition.labels_per_client", "must be >= 1".into());
            }
        }
        if self.model.hidden_dims.iter().any(|&h| h == 0) {
            return bad("model.hidden_dims", "layer widths must be >= 1".into());
        }
        let t = self.plan.total_rounds;
        if t < 2 {
            return bad("plan.total_rounds", format!("must be >= 2, got {t}"));
        }
        let s = self.plan.checkpoint_rounds.unwrap_or(t / 2);
        if s == 0 || s >= t {
            return bad(
                "plan.checkpoint_rounds",
                format!("need 1 <= s < T, got s = {s}, T = {t}"),
            );
        }
        if self.plan.neighbor_k == 0 {
            return bad("plan.neighbor_k", "must be >= 1".into());
        }
        if let AggregatorKind::FedAvg { weights } = &self.plan.aggregator {
            if !weights.is_empty() && weights.len() != self.clients.count {
                return bad(
                    "plan.aggregator.weights",
                    format!(
                        "{} weights for {} clients",
                        weights.len(),
                        self.clients.count
                    ),
                );
            }
        }
        self.schedules
            .validate()
            .map_err(|e| Error::InvalidConfig(format!("schedules: {e}")))?;
        let c = &self.condensation;
        if c.samples == 0 {
            return bad("condensation.samples", "must be >= 1".into());
        }
        if c.inner_steps == 0 {
            return bad("condensation.inner_steps", "must be >= 1".into());
        }
        if c.inner_steps > s {
            return bad(
                "condensation.inner_steps",
                format!("{} exceeds the {s} stored checkpoints", c.inner_steps),
            );
        }
        if !(c.inner_lr > 0.0) || !(c.data_lr > 0.0) {
            return bad("condensation", "inner_lr and data_lr must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(
                "threshold",
                format!("must lie in (0, 1), got {}", self.threshold),
            );
        }
        if self.eval_neighbor_k == 0 {
            return bad("eval_neighbor_k", "must be >= 1".into());
        }
        Ok(())
    }

    /// Materialize the dataset. IDX data gets the group id appended as a
    /// trailing feature column, matching the generator's layout.
    pub fn load_dataset(&self) -> Result<TabularDataset> {
        match &self.dataset {
            DatasetSpec::Generator(spec) => generate_biased_tabular(spec),
            DatasetSpec::Idx {
                images,
                labels,
                digit_threshold,
            } => {
                let raw = load_idx_with(images, labels, *digit_threshold)?;
                let group = raw.group.clone().expect("idx loader sets parity groups");
                let n = raw.len();
                let p = raw.num_features();
                let mut features = Array2::zeros((n, p + 1));
                features.slice_mut(ndarray::s![.., ..p]).assign(&raw.features);
                for i in 0..n {
                    features[[i, p]] = group[i] as f64;
                }
                TabularDataset::new(features, raw.labels, Some(group))
            }
        }
    }

    /// Resolve everything into a runnable experiment. Deterministic: all
    /// derived seeds are fixed functions of `self.seed`.
    pub fn build(&self) -> Result<BuiltExperiment> {
        self.validate()?;
        let data = self.load_dataset()?;
        let holdout = ((data.len() as f64) * self.eval_fraction).round() as usize;
        if holdout == 0 || holdout >= data.len() {
            return Err(Error::InvalidConfig(format!(
                "eval_fraction: {} of {} rows leaves an empty split",
                self.eval_fraction,
                data.len()
            )));
        }
        let (train, eval) = data.split_holdout(holdout, self.derived_seed(1))?;
        let shards = partition(
            &train,
            self.clients.count,
            self.clients.partition,
            self.derived_seed(2),
        )?;

        let mut clients = Vec::with_capacity(shards.len());
        for (i, shard) in shards.into_iter().enumerate() {
            let batch = self.clients.batch_size.min(shard.len());
            let mut client =
                ClientState::new(i, shard, batch, self.derived_seed(100 + i as u64))?;
            client.l2 = self.clients.l2;
            client.dp = self.clients.dp;
            clients.push(client);
        }

        let cols = train.num_features();
        let model_shape = ModelShape::mlp(
            cols,
            self.model.hidden_dims.clone(),
            self.model.activation,
        );

        let aggregator = match &self.plan.aggregator {
            AggregatorKind::FedAvg { weights } if weights.is_empty() => {
                let total: usize = clients.iter().map(|c| c.dataset.len()).sum();
                AggregatorKind::FedAvg {
                    weights: clients
                        .iter()
                        .map(|c| c.dataset.len() as f64 / total as f64)
                        .collect(),
                }
            }
            other => other.clone(),
        };

        let t = self.plan.total_rounds;
        let plan = RoundPlan {
            total_rounds: t,
            checkpoint_rounds: self.plan.checkpoint_rounds.unwrap_or(t / 2),
            aggregator,
            metric: self.plan.metric,
            calibrator: self.plan.calibrator,
            neighbor_k: self.plan.neighbor_k,
        };

        let condensation = CondensationConfig {
            samples: self.condensation.samples,
            iterations: self.condensation.iterations,
            inner_steps: self.condensation.inner_steps,
            inner_lr: self.condensation.inner_lr,
            data_lr: self.condensation.data_lr,
            seed: self.derived_seed(3),
            server_shape: model_shape.clone(),
            feature_ranges: None,
            group_col: Some(cols - 1),
            num_groups: 2,
        };

        let experiment = Experiment {
            plan,
            schedules: self.schedules,
            condensation,
            model_shape,
            init_seed: self.derived_seed(4),
            noise_seed: self.derived_seed(5),
            threshold: self.threshold,
            eval_neighbor_k: self.eval_neighbor_k,
        };
        Ok(BuiltExperiment {
            experiment,
            clients,
            eval,
        })
    }

    fn derived_seed(&self, salt: u64) -> u64 {
        // splitmix-style mix so nearby master seeds do not collide streams
        let mut z = self
            .seed
            .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// A config resolved against its data: ready for `run_experiment`.
pub struct BuiltExperiment {
    pub experiment: Experiment,
    pub clients: Vec<ClientState>,
    pub eval: TabularDataset,
}
