//! The round-based protocol: client local training with optional DP noise,
//! checkpoint collection during the first `s` rounds, one-time condensation
//! at round `s + 1`, and calibrated global updates from then on.

mod partition;
mod trace;

pub use partition::{partition, PartitionScheme};
pub use trace::{MetricTrace, RoundRecord};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, noise_update, AggregatorKind, NoiseKind};
use crate::condensation::{datasyn, CheckpointStore, CondensationConfig, SyntheticDataset};
use crate::dataset::TabularDataset;
use crate::error::{Error, Result};
use crate::fairness::{
    bias_score, surrogate_grad, surrogate_loss, FairnessMetricKind, NeighborGraph,
};
use crate::model::{accuracy, loss_and_grad, ModelParams, ModelShape, Update};

/// DP-SGD style noising of client updates: clip to an L2 ball of radius
/// `clip_norm`, then add `N(0, sigma^2 clip_norm^2)` per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpNoiseConfig {
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    pub sigma: f64,
}

fn default_clip_norm() -> f64 {
    0.05
}

impl DpNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_norm <= 0.0 {
            return Err(Error::InvalidConfig("dp clip_norm must be positive".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidConfig("dp sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// One client: its private shard and sampling behavior.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub dataset: TabularDataset,
    pub batch_size: usize,
    pub seed: u64,
    pub dp: Option<DpNoiseConfig>,
    /// L2 penalty coefficient added to the local objective; 0 disables it.
    pub l2: f64,
}

impl ClientState {
    pub fn new(id: usize, dataset: TabularDataset, batch_size: usize, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyBatch("client dataset"));
        }
        if batch_size == 0 || batch_size > dataset.len() {
            return Err(Error::InvalidConfig(format!(
                "client {id}: batch size {batch_size} out of range for {} rows",
                dataset.len()
            )));
        }
        Ok(Self {
            id,
            dataset,
            batch_size,
            seed,
            dp: None,
            l2: 0.0,
        })
    }
}

/// Mini-batch gradient of the client's local loss at the global model.
/// Sampling is shuffled-without-replacement, reseeded per `(client, round)`,
/// so the result is deterministic. With DP configured the gradient is
/// clipped and noised before it leaves the client.
pub fn client_update(client: &ClientState, global: &ModelParams, round: usize) -> Result<Update> {
    let mut rng = ChaCha8Rng::seed_from_u64(client.seed);
    rng.set_stream(round as u64);

    let n = client.dataset.len();
    let batch = if client.batch_size == n {
        client.dataset.clone()
    } else {
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng);
        client.dataset.select_rows(&rows[..client.batch_size])
    };

    let (_, mut grad) = loss_and_grad(global, &batch)?;
    if client.l2 > 0.0 {
        for (g, w) in grad.values.iter_mut().zip(&global.values) {
            *g += client.l2 * w;
        }
    }

    if let Some(dp) = &client.dp {
        dp.validate()?;
        let norm = grad.norm();
        if norm > dp.clip_norm {
            grad = grad.scale(dp.clip_norm / norm);
        }
        if dp.sigma > 0.0 {
            let normal = Normal::new(0.0, dp.sigma * dp.clip_norm).expect("finite std");
            for g in grad.values.iter_mut() {
                *g += normal.sample(&mut rng);
            }
        }
    }
    Ok(grad)
}

/// Learning-rate schedule: constant, or `scale / (t + offset)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EtaSchedule {
    Constant { value: f64 },
    Decaying { scale: f64, offset: f64 },
}

impl EtaSchedule {
    pub fn at(&self, round: usize) -> f64 {
        match self {
            EtaSchedule::Constant { value } => *value,
            EtaSchedule::Decaying { scale, offset } => scale / (round as f64 + offset),
        }
    }
}

/// Calibration-weight schedule: constant, or `1 / (t + offset)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaSchedule {
    Constant { value: f64 },
    Decaying { offset: f64 },
}

impl GammaSchedule {
    pub fn at(&self, round: usize) -> f64 {
        match self {
            GammaSchedule::Constant { value } => *value,
            GammaSchedule::Decaying { offset } => 1.0 / (round as f64 + offset),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub eta: EtaSchedule,
    pub gamma: GammaSchedule,
}

impl Schedules {
    pub fn constant(eta: f64, gamma: f64) -> Self {
        Self {
            eta: EtaSchedule::Constant { value: eta },
            gamma: GammaSchedule::Constant { value: gamma },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.eta {
            EtaSchedule::Constant { value } => value > 0.0,
            EtaSchedule::Decaying { scale, offset } => scale > 0.0 && offset > 0.0,
        } && match self.gamma {
            GammaSchedule::Constant { value } => value >= 0.0,
            GammaSchedule::Decaying { offset } => offset > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "schedule constants must be positive".into(),
            ))
        }
    }
}

/// Who produces the calibrated update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibratorKind {
    /// Gradient of the fairness surrogate on the synthetic set.
    EquFl,
    /// Gaussian noise baseline.
    Gaussian,
    /// Uniform noise baseline.
    Uniform,
    /// No calibration: plain aggregation for all rounds.
    None,
}

/// Per-experiment control state: horizon, checkpoint budget, aggregation,
/// and calibration choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    /// Total rounds `T`.
    pub total_rounds: usize,
    /// Checkpoint rounds `s`; calibration starts at `s + 1`.
    pub checkpoint_rounds: usize,
    pub aggregator: AggregatorKind,
    /// Fairness metric the calibrated update optimizes.
    pub metric: FairnessMetricKind,
    pub calibrator: CalibratorKind,
    /// Neighbor count for the consistency surrogate on the synthetic set.
    #[serde(default = "default_neighbor_k")]
    pub neighbor_k: usize,
}

fn default_neighbor_k() -> usize {
    5
}

impl RoundPlan {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_rounds == 0 || self.checkpoint_rounds >= self.total_rounds {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= s < T, got s = {}, T = {}",
                self.checkpoint_rounds, self.total_rounds
            )));
        }
        Ok(())
    }
}

/// Everything the server holds between rounds.
pub struct ServerState {
    pub round: usize,
    pub global: ModelParams,
    pub store: CheckpointStore,
    pub synthetic: Option<SyntheticDataset>,
    syn_dataset: Option<TabularDataset>,
    syn_neighbors: Option<NeighborGraph>,
    noise_rng: ChaCha8Rng,
}

impl ServerState {
    pub fn new(initial: ModelParams, noise_seed: u64) -> Self {
        Self {
            round: 1,
            global: initial,
            store: CheckpointStore::new(),
            synthetic: None,
            syn_dataset: None,
            syn_neighbors: None,
            noise_rng: ChaCha8Rng::seed_from_u64(noise_seed),
        }
    }

    pub fn synthetic_dataset(&self) -> Option<&TabularDataset> {
        self.syn_dataset.as_ref()
    }
}

/// Outcome of one round, before evaluation metrics are attached.
pub struct RoundOutcome {
    /// Whether a calibrated update was injected this round.
    pub calibrated: bool,
    /// Surrogate loss of the new global model on the synthetic set.
    pub surrogate_syn: Option<f64>,
    /// Whether `F_syn(w_next) < F_syn(v_next)` with `v_next` the
    /// aggregation-only counterfactual.
    pub calibrated_dominates: Option<bool>,
}

/// Execute round `t` of the protocol, mutating the server state in place.
pub fn run_round(
    state: &mut ServerState,
    plan: &RoundPlan,
    condensation: &CondensationConfig,
    schedules: &Schedules,
    clients: &[ClientState],
    t: usize,
) -> Result<RoundOutcome> {
    plan.validate()?;
    let s = plan.checkpoint_rounds;

    // Step I: checkpoint collection happens on the model sent out this round.
    if t <= s {
        state.store.append(t, state.global.clone())?;
    }

    // Step II: local training.
    let updates: Vec<Update> = clients
        .iter()
        .map(|c| client_update(c, &state.global, t))
        .collect::<Result<_>>()?;

    // Step III: aggregation and global model update.
    let aggregated = aggregate(&plan.aggregator, &updates)?;
    let eta = schedules.eta.at(t);
    let gamma = schedules.gamma.at(t);

    if t == s + 1 {
        // w^{s+1} is still on the plain-aggregation trajectory (it was
        // produced by round s), so it joins the store as the final
        // checkpoint; this also makes segment pairs exist when s = 1
        state.store.append(t, state.global.clone())?;
        state.store.freeze();
        let syn = datasyn(&state.store, condensation)?;
        let ds = syn.as_dataset();
        let k = plan.neighbor_k.min(ds.len().saturating_sub(1)).max(1);
        state.syn_neighbors = Some(NeighborGraph::build(&ds.features, k)?);
        state.syn_dataset = Some(ds);
        state.synthetic = Some(syn);
    }

    let outcome = if t > s {
        let dim = aggregated.dim();
        let calibrated_update = match plan.calibrator {
            CalibratorKind::EquFl => {
                let syn = state
                    .syn_dataset
                    .as_ref()
                    .expect("synthetic set exists after round s+1");
                surrogate_grad(
                    plan.metric,
                    &state.global,
                    syn,
                    state.syn_neighbors.as_ref(),
                )?
            }
            CalibratorKind::Gaussian => {
                noise_update(NoiseKind::default_gaussian(), dim, &mut state.noise_rng)
            }
            CalibratorKind::Uniform => {
                noise_update(NoiseKind::default_uniform(), dim, &mut state.noise_rng)
            }
            CalibratorKind::None => Update::zeros(dim),
        };
        let combined = aggregated.add_scaled(&calibrated_update, gamma)?;
        let next = state.global.step(&combined, eta)?;
        // aggregation-only counterfactual, kept for dominance diagnostics
        let counterfactual = state.global.step(&aggregated, eta)?;
        let (surrogate_syn, dominates) = match &state.syn_dataset {
            Some(syn) => {
                let f_w = surrogate_loss(
                    plan.metric,
                    &next,
                    syn,
                    state.syn_neighbors.as_ref(),
                )?;
                let f_v = surrogate_loss(
                    plan.metric,
                    &counterfactual,
                    syn,
                    state.syn_neighbors.as_ref(),
                )?;
                (Some(f_w), Some(f_w < f_v))
            }
            None => (None, None),
        };
        state.global = next;
        RoundOutcome {
            calibrated: true,
            surrogate_syn,
            calibrated_dominates: dominates,
        }
    } else {
        state.global = state.global.step(&aggregated, eta)?;
        RoundOutcome {
            calibrated: false,
            surrogate_syn: None,
            calibrated_dominates: None,
        }
    };

    if !state.global.is_finite() {
        return Err(Error::NonFinite {
            context: format!("global model after round {t}"),
            index: t,
        });
    }
    state.round = t + 1;
    Ok(outcome)
}

/// Full experiment description for [`run_experiment`].
#[derive(Debug, Clone)]
pub struct Experiment {
    pub plan: RoundPlan,
    pub schedules: Schedules,
    pub condensation: CondensationConfig,
    pub model_shape: ModelShape,
    pub init_seed: u64,
    pub noise_seed: u64,
    /// Threshold for hard metrics and accuracy on the evaluation set.
    pub threshold: f64,
    /// Neighbor count for the consistency metric on the evaluation set.
    pub eval_neighbor_k: usize,
}

/// What [`run_experiment`] hands back.
pub struct ExperimentOutput {
    pub trace: MetricTrace,
    pub final_global: ModelParams,
    pub synthetic: Option<SyntheticDataset>,
}

/// Run `T` rounds and record per-round training loss, test accuracy, the
/// four bias scores on the evaluation set, and the synthetic-surrogate
/// diagnostics. Deterministic given the seeds.
///
/// ```
/// use fedfair::aggregation::AggregatorKind;
/// use fedfair::condensation::CondensationConfig;
/// use fedfair::fairness::FairnessMetricKind;
/// use fedfair::federation::{
///     partition, run_experiment, CalibratorKind, ClientState, Experiment,
///     PartitionScheme, RoundPlan, Schedules,
/// };
/// use fedfair::harness::{generate_biased_tabular, BiasedTabularSpec};
/// use fedfair::model::ModelShape;
///
/// let spec = BiasedTabularSpec {
///     samples: 120, features: 2, group_b_fraction: 0.5,
///     shift: 1.0, flip_rate: 0.2, seed: 5,
/// };
/// let data = generate_biased_tabular(&spec).unwrap();
/// let (train, eval) = data.split_holdout(40, 9).unwrap();
/// let clients: Vec<ClientState> = partition(&train, 2, PartitionScheme::Iid, 1)
///     .unwrap()
///     .into_iter()
///     .enumerate()
///     .map(|(i, shard)| ClientState::new(i, shard, 16, i as u64).unwrap())
///     .collect();
/// let shape = ModelShape::logistic(train.num_features());
///
/// let experiment = Experiment {
///     plan: RoundPlan {
///         total_rounds: 6,
///         checkpoint_rounds: 3,
///         aggregator: AggregatorKind::fedavg_uniform(2),
///         metric: FairnessMetricKind::Eo,
///         calibrator: CalibratorKind::EquFl,
///         neighbor_k: 3,
///     },
///     schedules: Schedules::constant(0.1, 1.0),
///     condensation: CondensationConfig {
///         samples: 8,
///         iterations: 5,
///         inner_steps: 1,
///         inner_lr: 0.1,
///         data_lr: 1.0,
///         seed: 2,
///         server_shape: shape.clone(),
///         feature_ranges: None,
///         group_col: Some(train.num_features() - 1),
///         num_groups: 2,
///     },
///     model_shape: shape,
///     init_seed: 3,
///     noise_seed: 4,
///     threshold: 0.5,
///     eval_neighbor_k: 3,
/// };
/// let out = run_experiment(&experiment, &clients, &eval).unwrap();
/// assert_eq!(out.trace.records().len(), 6);
/// assert!(out.synthetic.is_some()); // built once, at round s + 1
/// ```
pub fn run_experiment(
    experiment: &Experiment,
    clients: &[ClientState],
    eval: &TabularDataset,
) -> Result<ExperimentOutput> {
    experiment.plan.validate()?;
    experiment.schedules.validate()?;
    if clients.is_empty() {
        return Err(Error::EmptyBatch("clients"));
    }
    if eval.group.is_none() {
        return Err(Error::InvalidConfig(
            "evaluation dataset must carry group ids".into(),
        ));
    }

    let pooled: Vec<&TabularDataset> = clients.iter().map(|c| &c.dataset).collect();
    let pooled = TabularDataset::concat(&pooled)?;
    let eval_k = experiment
        .eval_neighbor_k
        .min(eval.len().saturating_sub(1))
        .max(1);
    let eval_neighbors = NeighborGraph::build(&eval.features, eval_k)?;

    let initial = ModelParams::init_xavier(experiment.model_shape.clone(), experiment.init_seed);
    let mut state = ServerState::new(initial, experiment.noise_seed);
    let mut records = Vec::with_capacity(experiment.plan.total_rounds);

    for t in 1..=experiment.plan.total_rounds {
        let outcome = run_round(
            &mut state,
            &experiment.plan,
            &experiment.condensation,
            &experiment.schedules,
            clients,
            t,
        )?;
        let train_loss = loss_and_grad(&state.global, &pooled)?.0;
        let test_accuracy = accuracy(&state.global, eval, experiment.threshold)?;
        let score = |kind, nbrs: Option<&NeighborGraph>| {
            bias_score(kind, &state.global, eval, experiment.threshold, nbrs)
        };
        records.push(RoundRecord {
            round: t,
            train_loss,
            test_accuracy,
            bias_eo: score(FairnessMetricKind::Eo, None)?,
            bias_dp: score(FairnessMetricKind::Dp, None)?,
            bias_cal: score(FairnessMetricKind::Cal, None)?,
            bias_con: score(FairnessMetricKind::Con, Some(&eval_neighbors))?,
            surrogate_syn: outcome.surrogate_syn,
            calibrated_dominates: outcome.calibrated_dominates,
        });
    }
    Ok(ExperimentOutput {
        trace: MetricTrace::new(records),
        final_global: state.global,
        synthetic: state.synthetic,
    })
}
