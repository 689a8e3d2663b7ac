//! Experiment driver: configuration, environment generation, oracle
//! comparators, and regret traces.
//!
//! A run is described by an [`ExperimentConfig`] (usually a TOML file),
//! turned into a seeded environment by [`generate_environment`], scored
//! against [`oracle_comparators`], and executed by [`run_experiment`],
//! which emits one CSV trace per seed plus a summary table. Horizon
//! sweeps with log-log slope fits live in [`sweep_experiment`].

pub mod comparator;
pub mod config;
pub mod environment;
pub mod runner;

pub use comparator::{
    dp_minimize_linear, frank_wolfe_minimize, oracle_comparators, solve_occupancy_min,
    ComparatorResult,
};
pub use config::{
    ComparatorMode, ComparatorSpec, EnvironmentKind, EnvironmentSpec, ExperimentConfig,
    KernelModeSpec, LearnerKind, LearnerSpec, ObjectiveKindSpec, ObjectiveSpec, RunSpec, ShapeSpec,
    CONFIG_VERSION,
};
pub use environment::{generate_environment, generate_map, GeneratedEnvironment};
pub use runner::{
    build_objectives, fit_loglog_slope, median, run_experiment, run_seed, run_seed_at,
    seeded_inputs, summary_csv, sweep_experiment, trace_csv, write_experiment, write_sweep,
    EpisodeRow, ExperimentReport, RegretTrace, RunSummary, SeededInputs, SweepPoint, SweepReport,
    SUMMARY_HEADER, TRACE_HEADER,
};
