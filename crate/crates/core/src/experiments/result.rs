//! What a run records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasets::{LabelMapKind, LoadReport};
use crate::metrics::{EvalReport, KlReport};
use crate::training::{Aggregate, TrainingHistory};

use super::config::ExperimentConfig;

/// Bumped whenever the stored layout changes.
pub const RESULT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetResult {
    pub name: String,
    pub source: String,
    pub n_images: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scoring: Option<LabelMapKind>,
    pub report: EvalReport,
    /// Fraction of predictions equal to `(label + 1) mod n`.
    pub shift1_mass: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<KlReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub name: String,
    pub train_images: usize,
    pub validation_images: usize,
    pub history: TrainingHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub phase: String,
    /// Zero-based within the phase.
    pub epoch: usize,
    /// Zero-based across phases.
    pub global_epoch: usize,
    pub regular_accuracy: f64,
    pub negative_accuracy: f64,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSummary {
    pub layer: String,
    pub probe_index: usize,
    pub channels: Vec<usize>,
    /// Per-tile `(min, max)` used to map each map onto 0..=255.
    pub regular_bounds: Vec<(f32, f32)>,
    pub negative_bounds: Vec<(f32, f32)>,
    /// Mean over channels of `sum|a - b| / sum(|a| + |b|)`; 0 for identical rows.
    pub mean_relative_difference: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub phases: Vec<PhaseResult>,
    pub evaluations: Vec<SetResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tracking: Vec<TrackPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationSummary>,
}

impl RunResult {
    pub fn evaluation(&self, name: &str) -> Option<&SetResult> {
        self.evaluations.iter().find(|e| e.name == name)
    }
}

/// Per-epoch tracking averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackAggregate {
    pub phase: String,
    pub epoch: usize,
    pub global_epoch: usize,
    pub regular_accuracy: Aggregate,
    pub negative_accuracy: Aggregate,
    pub mean_kl: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// Runs before the failing seed are kept.
    Failed { seed: u64, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub data_root: String,
    pub loads: Vec<LoadReport>,
    pub started_at: String,
    pub finished_at: String,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub experiment_id: String,
    pub config_hash: String,
    /// The effective config, as run.
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub runs: Vec<RunResult>,
    /// Keys: `<set>.accuracy`, `<set>.mean_kl`, `<set>.class<k>.accuracy`,
    /// `<phase>.train_accuracy`, `<phase>.selected_epoch`, `activation.mean_relative_difference`.
    pub aggregates: BTreeMap<String, Aggregate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tracking: Vec<TrackAggregate>,
    pub provenance: Provenance,
}

impl ExperimentResult {
    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Complete
    }

    pub fn aggregate(&self, key: &str) -> Option<&Aggregate> {
        self.aggregates.get(key)
    }

    pub fn mean(&self, key: &str) -> Option<f64> {
        self.aggregate(key).map(|a| a.mean)
    }
}

/// Aggregates every per-run scalar that all runs share.
pub fn aggregate_runs(runs: &[RunResult]) -> BTreeMap<String, Aggregate> {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in runs {
        let mut put = |k: String, v: f64| columns.entry(k).or_default().push(v);
        for e in &run.evaluations {
            put(format!("{}.accuracy", e.name), e.report.accuracy);
            if let Some(kl) = &e.kl {
                put(format!("{}.mean_kl", e.name), kl.mean_kl);
            }
            for (k, a) in e.report.per_class_accuracy.iter().enumerate() {
                if let Some(a) = a {
                    put(format!("{}.class{k}.accuracy", e.name), *a);
                }
            }
        }
        for p in &run.phases {
            put(format!("{}.train_accuracy", p.name), p.history.selected().train_accuracy);
            put(format!("{}.selected_epoch", p.name), p.history.selected_epoch as f64);
        }
        if let Some(a) = &run.activation {
            put("activation.mean_relative_difference".into(), a.mean_relative_difference);
        }
    }
    columns
        .into_iter()
        .filter(|(_, v)| v.len() == runs.len())
        .map(|(k, v)| {
            let agg = Aggregate::from_values(v).expect("nonempty column");
            (k, agg)
        })
        .collect()
}

/// Seed-averaged tracking points; epochs missing from any run are dropped.
pub fn aggregate_tracking(runs: &[RunResult]) -> Vec<TrackAggregate> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    first
        .tracking
        .iter()
        .filter_map(|p| {
            let same: Vec<&TrackPoint> = runs
                .iter()
                .filter_map(|r| r.tracking.iter().find(|q| q.global_epoch == p.global_epoch))
                .collect();
            if same.len() != runs.len() {
                return None;
            }
            let col = |f: fn(&TrackPoint) -> f64| {
                Aggregate::from_values(same.iter().map(|q| f(q)).collect()).expect("nonempty")
            };
            Some(TrackAggregate {
                phase: p.phase.clone(),
                epoch: p.epoch,
                global_epoch: p.global_epoch,
                regular_accuracy: col(|q| q.regular_accuracy),
                negative_accuracy: col(|q| q.negative_accuracy),
                mean_kl: col(|q| q.mean_kl),
            })
        })
        .collect()
}
