//! Experiment runner for the in-context Bayes laboratory: TOML
//! configuration, one pipeline per subcommand, CSV reports with metadata
//! sidecars and a run manifest.

pub mod config;
pub mod error;
pub mod run;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use run::{run, RunManifest, Subcommand};
