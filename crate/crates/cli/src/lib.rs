//! Batch orchestration for pruning experiments: corpus generation, pruning,
//! evaluation and analysis driven by one TOML config.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use pipeline::Pipeline;
