//! Experiment orchestration, sweeps, leakage evaluation and reporting.

pub mod config;
pub mod engine;
pub mod leakage;
pub mod report;
pub mod sweep;

pub use config::{DataSource, DlgExperimentConfig, ExperimentConfig, RosterConfig, SweepConfig, SweepGrid};
pub use engine::{comm_cost, run_experiment, ExperimentResult, RoundLog, Simulation};
pub use leakage::{dlg_csv, run_dlg_experiment, DlgCell, DlgReport, PUBLISHED_REFERENCE};
pub use report::{render_run, run_csv, sweep_csv, OutputFormat, SweepRow};
pub use sweep::run_sweep;
