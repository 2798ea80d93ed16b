//! Federated-learning simulator with server-side fairness calibration.
//!
//! The server trains a global binary classifier with pluggable aggregation
//! rules, collects early-round checkpoints, condenses them into a synthetic
//! dataset by trajectory matching, and from then on adds a calibrated update
//! (the gradient of a differentiable fairness surrogate on the synthetic set)
//! to every aggregated round.
//!
//! See the `book/` directory for a guided tour of the concepts and the
//! `fedfair` binary for the experiment harness.

pub mod aggregation;
pub mod condensation;
pub mod dataset;
pub mod error;
pub mod fairness;
pub mod federation;
pub mod harness;
pub mod model;

pub use dataset::TabularDataset;
pub use error::{Error, Result};
