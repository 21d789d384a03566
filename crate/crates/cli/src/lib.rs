//! Experiment runner: configuration, runs, ablation grids, reports and self-checks.

pub mod ablate;
pub mod checks;
pub mod config;
pub mod error;
pub mod fetch;
pub mod report;
pub mod run;

pub use error::CliError;
