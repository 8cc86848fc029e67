//! Experiment runner: seeded episode batches, metrics, sweeps,
//! calibration and result emission.
//!
//! Episodes inside a batch are embarrassingly parallel and run through
//! a rayon pool when the `parallel` feature is enabled (the default);
//! results are identical either way because every episode owns a seed
//! stream derived from (master seed, episode index) alone. Deriving the
//! episode seed independently of the strategy arm gives common random
//! numbers across arms, which tightens every between-arm comparison.

mod calibrate;
mod config;
mod exec;
mod io;
mod metrics;
mod pareto;
mod runner;

pub use calibrate::{calibration_report, CalibrationReport, CalibrationRow};
pub use config::{ExperimentConfig, GridConfig, PredictorChoice};
pub use exec::Execution;
pub use io::{
    audit_episode_logs, read_episode_logs, read_results, write_csv, write_episode_logs,
    write_pareto_csv, write_results, AuditReport, ResultsFile,
};
pub use metrics::{gen_cost, norm_compute, norm_latency, MetricsRecord};
pub use pareto::{pareto_points, ParetoPoint};
pub use runner::{
    build_predictors, cell, run_batch, run_batch_with, run_episode, single_sample_baselines,
    BatchOutput, CellResult, EpisodeOutcome, LoggedEpisode,
};
