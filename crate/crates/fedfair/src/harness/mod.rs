//! Experiment plumbing: dataset generation and loading, JSON configs, and
//! the command-line front end.

mod cli;
mod config;
mod generator;
mod idx;

pub use cli::run_cli;
pub use config::{
    BuiltExperiment, ClientSettings, CondensationSettings, DatasetSpec, ExperimentConfig,
    ModelSettings, PlanSettings,
};
pub use generator::{generate_biased_tabular, BiasedTabularSpec};
pub use idx::{load_idx, load_idx_with};
