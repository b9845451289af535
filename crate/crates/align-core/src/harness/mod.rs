//! Optimizers, experiment configuration, scenario builders, metrics
//! reporting, and the invariant suite behind the CLI.

pub mod checks;
pub mod config;
pub mod experiment;
pub mod optimize;
pub mod scenario;

pub use checks::{position_weight_audit, run_invariant_suite, AuditReport, CheckOutcome};
pub use config::{
    DataMode, ExperimentConfig, ObjectiveKind, ResolvedExperiment, SweepAxis,
};
pub use experiment::{
    run_experiment, run_sweep, sweep_to_csv, ExperimentOutcome, MetricsReport, MetricsRow,
    SweepRow,
};
pub use optimize::{optimize_keyed, optimize_policy, OptMethod, OptTrace, OptimizerConfig};
pub use scenario::build_bimodal_scenario;
