//! Deterministic single-process simulator of federated learning with a split
//! feature-extractor/classifier model, differentially private feature sharing,
//! weighted FedAvg aggregation, server-side classifier retraining, and a
//! histogram-based privacy-metric suite.

pub mod config;
pub mod data;
pub mod dp;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod proto;
pub mod tensor;

pub use error::{Error, Result};
