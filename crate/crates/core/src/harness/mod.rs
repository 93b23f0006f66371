//! Experiment orchestration: configuration, the strategy × buffer size ×
//! seed grid, and CSV reports.

mod config;
mod report;
mod run;

pub use config::{default_profile, ExperimentConfig, OrderSpec, ReplayMode};
pub use report::{emit_reports, render_reports};
pub use run::{
    generate_scenes, rerun_failed, run_cell, run_experiment, run_experiment_with, CellOutcome, CellRecord, CellResult,
    RunOptions, RunRecord, TaskLoss,
};
