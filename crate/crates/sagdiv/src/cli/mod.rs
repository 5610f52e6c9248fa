//! Command-line orchestration: configuration ingestion, experiment
//! execution, model persistence, and report emission.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod persist;
pub mod report;

pub use commands::{cmd_bench, cmd_fit, cmd_predict, BenchOutcome};
pub use config::{load_config, BudgetPreset, RunConfig};
pub use persist::{load_model, save_model, PersistedModel};
