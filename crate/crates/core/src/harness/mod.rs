//! Experiment sweeps, reports and the command-line front end.

pub mod cli;
pub mod config;
pub mod report;
pub mod sweep;

pub use config::{ExperimentConfig, FeatureConfig, Recipe};
pub use report::{emit_learning_curve_plot, read_results_csv, results_csv, write_results_csv};
pub use sweep::{baseline_trend, run_sweep, summarize, ExperimentResult};
