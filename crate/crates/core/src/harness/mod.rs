//! Experiment orchestration: configuration, Monte Carlo runs, sweeps and export.

pub mod config;
pub mod experiment;
pub mod export;
pub mod sweep;

pub use config::{ExperimentConfig, SweepSpec};
pub use experiment::{run_experiment, ExperimentResult, PreparedExperiment, RunMetrics};
pub use export::{export_experiment, export_sweep, ExportFormat};
pub use sweep::{crossover_report, run_sweep, CrossoverReport, SweepResult};
