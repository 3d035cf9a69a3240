//! Experiment runner and human-oracle service for `scopegen_core` on the
//! synthetic world.

pub mod config;
pub mod experiment;
pub mod results;
pub mod server;
pub mod session;

pub use config::{ExperimentConfig, Method, Nonconformity};
pub use experiment::{run_experiment, run_trial, run_trials, Calibrated, TrialOutcome};
pub use results::{emit_results, read_results, MetricsRow, CSV_HEADER};
