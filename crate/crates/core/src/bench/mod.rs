//! Experiment configuration, metrics and the session driver.

pub mod config;
pub mod experiment;
pub mod metrics;

pub use config::{BackboneKind, DataSource, Method, ModelConfig, RunConfig};
pub use experiment::{run_experiment, MemorySummary, RunOutcome, SessionReport};
pub use metrics::{accuracy, forgetting, predictions, purity, AccuracyMatrix};
