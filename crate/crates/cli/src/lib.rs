//! Experiment harness: configuration, run directories, the phased pipeline,
//! sweeps and report tables.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::CliError;
