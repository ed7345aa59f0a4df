//! Staged, cached experiment pipeline around `fvdet-core`: configuration,
//! dataset ingestion, synthetic data and the model container.

pub mod config;
pub mod dataset;
pub mod synth;
pub mod container;
pub mod pipeline;
