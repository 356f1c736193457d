//! IO, configuration, and orchestration around the training core: CSV
//! ingestion, experiment configs, checkpoints, the metrics report, and the
//! pipeline the `pinda` binary drives.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod logging;

pub use error::{CliError, Result};
