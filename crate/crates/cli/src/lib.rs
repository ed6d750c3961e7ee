//! Command-line orchestration of the longitudinal PET/CT pipeline.
//!
//! - [`config`]: the declarative run file and seed derivation stages
//! - [`segment`]: oracle, threshold-union and network segmenters, MPDR
//! - [`pipeline`]: phantom cohort to report, with a per-patient worker pool
//! - [`report`]: report documents and CSV tables
//! - [`manifest`]: run provenance
//! - [`commands`]: the `laspet` subcommands
//! - [`error`]: stage-tagged failures and exit codes

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod segment;

pub use config::PipelineConfig;
pub use error::{CliError, CliResult, Stage};
