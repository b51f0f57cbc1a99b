//! Command-line harness: dataset generation and ingestion, base training,
//! the six experiments and result tables.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{
    cmd_experiment, cmd_generate, cmd_ingest, cmd_report, cmd_train_base, load_base, CascadeMeta,
    ExperimentId,
};
pub use config::RunConfig;
pub use error::CliError;
pub use manifest::DatasetManifest;
