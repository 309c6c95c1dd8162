//! Declarative experiment configs, the built-in catalog and the runner.

mod catalog;
mod config;
mod grid;
mod result;
mod runner;

pub use catalog::{
    catalog, find, COUNT_SWEEP_VALUES, DESK_CIFAR_TRAIN, DIVERSITY_NEGATIVES, EXCL_SPOT_CHECK,
    HOLDOUT_FRACTION, RANDOM_COUNT,
};
pub use config::{
    ActivationProbe, ClassSet, DataExpr, EvalSet, ExclusionPart, ExperimentConfig, Group,
    ModelConfig, Phase, Profile, Signature, SourceCache, SweepParam, SweepPoint, SweepSpec,
    SweepValue, Tracking,
};
pub use grid::{dump_activation_grid, ActivationGrid};
pub use result::{
    aggregate_runs, aggregate_tracking, ActivationSummary, ExperimentResult, PhaseResult,
    Provenance, RunResult, RunStatus, SetResult, TrackAggregate, TrackPoint, RESULT_SCHEMA_VERSION,
};
pub use runner::{paired_evaluation, run_experiment, FinetuneCase, RunOptions, Runner};
