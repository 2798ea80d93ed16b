//! Parameterized biased-tabular generator: a two-group binary task with
//! controllable, known-in-advance group bias.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::TabularDataset;
use crate::error::{Error, Result};

/// Generator knobs. Group B (id 1) gets its feature means shifted by
/// `shift` and its labels flipped with probability `flip_rate`; group A
/// (id 0) is clean. The group id is appended as the last feature column so
/// models can condition on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedTabularSpec {
    pub samples: usize,
    /// Informative Gaussian features, before the appended group column.
    pub features: usize,
    /// Fraction of rows assigned to group B.
    #[serde(default = "default_group_b_fraction")]
    pub group_b_fraction: f64,
    pub shift: f64,
    pub flip_rate: f64,
    pub seed: u64,
}

fn default_group_b_fraction() -> f64 {
    0.5
}

impl BiasedTabularSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.features == 0 {
            return Err(Error::InvalidConfig(
                "generator needs samples > 0 and features > 0".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.flip_rate) {
            return Err(Error::InvalidConfig(format!(
                "flip_rate must lie in [0, 0.5), got {}",
                self.flip_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.group_b_fraction)
            || self.group_b_fraction == 0.0
            || self.group_b_fraction == 1.0
        {
            return Err(Error::InvalidConfig(format!(
                "group_b_fraction must lie in (0, 1), got {}",
                self.group_b_fraction
            )));
        }
        Ok(())
    }

    /// Total feature columns of the generated dataset (group column included).
    pub fn total_columns(&self) -> usize {
        self.features + 1
    }
}

/// Draw the dataset. Features are class-conditional Gaussians with means
/// at `±1` per coordinate and unit variance; group B means are offset by
/// `shift` and group B labels flip with probability `flip_rate`.
/// Deterministic per seed.
///
/// ```
/// use fedfair::harness::{generate_biased_tabular, BiasedTabularSpec};
///
/// let spec = BiasedTabularSpec {
///     samples: 100, features: 3, group_b_fraction: 0.4,
///     shift: 1.0, flip_rate: 0.2, seed: 1,
/// };
/// let data = generate_biased_tabular(&spec).unwrap();
/// assert_eq!(data.len(), 100);
/// assert_eq!(data.num_features(), 4); // 3 features + group column
/// assert!(data.group.is_some());
/// ```
pub fn generate_biased_tabular(spec: &BiasedTabularSpec) -> Result<TabularDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.samples;
    let p = spec.features;

    let mut features = Array2::zeros((n, p + 1));
    let mut labels = Vec::with_capacity(n);
    let mut group = Vec::with_capacity(n);
    for i in 0..n {
        let g = usize::from(rng.gen_bool(spec.group_b_fraction));
        let true_label = rng.gen_bool(0.5);
        let mean = if true_label { 1.0 } else { -1.0 };
        let offset = if g == 1 { spec.shift } else { 0.0 };
        for j in 0..p {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features[[i, j]] = mean + offset + noise;
        }
        features[[i, p]] = g as f64;
        let mut label = true_label;
        if g == 1 && spec.flip_rate > 0.0 && rng.gen_bool(spec.flip_rate) {
            label = !label;
        }
        labels.push(f64::from(label));
        group.push(g);
    }
    TabularDataset::new(features, labels, Some(group))
}
