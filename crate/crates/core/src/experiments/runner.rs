//! Executes experiment configs: builds data, trains per seed, evaluates, aggregates.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use crate::datasets::{holdout_split, negate, LabelMap, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_of, confusion_of, kl_divergence, KlReport, KL_EPSILON};
use crate::models::{Model, ModelSpec};
use crate::training::{finetune, train, EpochRecord, TrainContext, TrainingHistory};

use super::catalog;
use super::config::{ExperimentConfig, Profile, SourceCache, SweepParam, SweepValue};
use super::grid::dump_activation_grid;
use super::result::{
    aggregate_runs, aggregate_tracking, ActivationSummary, ExperimentResult, PhaseResult, Provenance, RunResult,
    RunStatus, SetResult, TrackPoint, RESULT_SCHEMA_VERSION,
};
use crate::report::ResultStore;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub data_root: PathBuf,
    /// Where logs and activation grids go; nothing is written when `None`.
    pub artifact_dir: Option<PathBuf>,
    /// Seeds trained at once; 0 uses the available parallelism.
    pub seed_threads: usize,
    /// One line per epoch on stderr.
    pub progress: bool,
}

impl RunOptions {
    pub fn new(data_root: impl Into<PathBuf>) -> Self {
        Self {
            data_root: data_root.into(),
            artifact_dir: None,
            seed_threads: 1,
            progress: false,
        }
    }
}

/// Datasets built once per config and shared by every seed.
struct Prepared {
    spec: ModelSpec,
    phases: Vec<LabeledDataset>,
    evaluations: Vec<LabeledDataset>,
    tracking: Option<LabeledDataset>,
    probe: Option<(usize, crate::datasets::ImageBatch)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneCase {
    /// Negatives keep their labels in phase 1.
    CorrectLabels,
    /// Negatives are labeled `(i + 1) mod 10` in phase 1.
    ShiftedNegativeLabels,
}

pub struct Runner {
    options: RunOptions,
    cache: SourceCache,
    store: Option<ResultStore>,
}

impl Runner {
    pub fn new(options: RunOptions) -> Self {
        let cache = SourceCache::new(options.data_root.clone(), Default::default());
        Self {
            options,
            cache,
            store: None,
        }
    }

    /// Persist every result, complete or partial, into `store`.
    pub fn with_store(mut self, store: ResultStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn store(&self) -> Option<&ResultStore> {
        self.store.as_ref()
    }

    fn prepare(&mut self, cfg: &ExperimentConfig) -> Result<Prepared> {
        cfg.validate()?;
        let spec = cfg.resolved_spec()?;
        self.cache.set_options(cfg.load_options);
        let build = |cache: &mut SourceCache, e: &super::config::DataExpr, what: &str| {
            cache
                .materialize(e)?
                .ok_or_else(|| Error::InvalidArgument(format!("{what} is empty")))
        };
        let mut phases = Vec::new();
        for p in &cfg.phases {
            phases.push(build(&mut self.cache, &p.train, &format!("phase `{}`", p.name))?);
        }
        let mut evaluations = Vec::new();
        for e in &cfg.evaluations {
            evaluations.push(build(&mut self.cache, &e.data, &format!("evaluation set `{}`", e.name))?);
        }
        let tracking = match &cfg.tracking {
            Some(t) => Some(build(&mut self.cache, &t.data, "tracking set")?),
            None => None,
        };
        let probe = match &cfg.activation_probe {
            Some(a) => {
                let ds = build(&mut self.cache, &a.data, "activation probe set")?;
                let index = ds
                    .labels()
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == a.label)
                    .map(|(i, _)| i)
                    .nth(a.occurrence)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "probe set has no image #{} of class {}",
                            a.occurrence, a.label
                        ))
                    })?;
                Some((index, ds.images().select(&[index])))
            }
            None => None,
        };
        Ok(Prepared {
            spec,
            phases,
            evaluations,
            tracking,
            probe,
        })
    }

    /// Runs every seed of `cfg`. A failing seed yields a result marked
    /// `Failed` holding the runs before it; it is persisted like any other
    /// and then reported as an error.
    pub fn run(&mut self, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
        let result = self.run_unpersisted(cfg)?;
        if let Some(store) = &self.store {
            store.persist(&result)?;
        }
        match &result.status {
            RunStatus::Complete => Ok(result),
            RunStatus::Failed { seed, error } => Err(Error::SeedFailed {
                seed: *seed,
                source: Box::new(Error::Training(error.clone())),
            }),
        }
    }

    /// Like `run` without touching the store, returning failed results as values.
    pub fn run_unpersisted(&mut self, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
        let started = chrono::Utc::now();
        let clock = Instant::now();
        let prepared = self.prepare(cfg)?;
        let hash = cfg.config_hash();
        let stamp = started.format("%Y%m%dT%H%M%S%3fZ").to_string();
        let log = match &self.options.artifact_dir {
            Some(dir) => {
                let logs = dir.join("logs");
                fs::create_dir_all(&logs).map_err(|e| Error::io(logs.display().to_string(), e))?;
                let path = logs.join(format!("{}.{}.{stamp}.jsonl", cfg.experiment_id, &hash[..8]));
                let f = File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let log = Mutex::new(log);
        let grid_dir = self.options.artifact_dir.as_ref().map(|d| d.join("grids"));
        if let Some(d) = &grid_dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d.display().to_string(), e))?;
        }
        let job = |seed: u64| {
            run_seed(cfg, &prepared, &hash, seed, &log, grid_dir.as_deref(), self.options.progress)
        };
        let seeds = cfg.seeds();
        let threads = match self.options.seed_threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        };
        let mut outcomes: Vec<Result<RunResult>> = Vec::new();
        for chunk in seeds.chunks(threads.max(1)) {
            if chunk.len() == 1 {
                outcomes.push(job(chunk[0]));
            } else {
                let done: Vec<Result<RunResult>> = std::thread::scope(|s| {
                    let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || job(seed))).collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("seed thread panicked"))
                        .collect()
                });
                outcomes.extend(done);
            }
            if outcomes.iter().any(Result::is_err) {
                break;
            }
        }
        if let Some(w) = log.lock().expect("log lock").as_mut() {
            w.flush().map_err(|e| Error::io("training log", e))?;
        }
        let mut runs = Vec::new();
        let mut status = RunStatus::Complete;
        for (seed, outcome) in seeds.iter().zip(outcomes) {
            match outcome {
                Ok(r) => runs.push(r),
                Err(e) => {
                    status = RunStatus::Failed {
                        seed: *seed,
                        error: e.to_string(),
                    };
                    break;
                }
            }
        }
        let sources = cfg.sources();
        let provenance = Provenance {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads,
            data_root: self.cache.root().display().to_string(),
            loads: self
                .cache
                .reports()
                .iter()
                .filter(|r| sources.contains(&(r.dataset, r.split)))
                .cloned()
                .collect(),
            started_at: started.to_rfc3339(),
            finished_at: chrono::Utc::now().to_rfc3339(),
            wall_time_seconds: clock.elapsed().as_secs_f64(),
        };
        Ok(ExperimentResult {
            schema_version: RESULT_SCHEMA_VERSION,
            experiment_id: cfg.experiment_id.clone(),
            config_hash: hash,
            config: cfg.clone(),
            status,
            aggregates: aggregate_runs(&runs),
            tracking: aggregate_tracking(&runs),
            runs,
            provenance,
        })
    }

    /// One result per value; every point uses the base config's seed list.
    pub fn run_sweep(
        &mut self,
        base: &ExperimentConfig,
        parameter: SweepParam,
        values: &[SweepValue],
    ) -> Result<Vec<ExperimentResult>> {
        let declared = base.sweep.as_ref().map(|s| s.parameter);
        if declared != Some(parameter) {
            return Err(Error::InvalidArgument(format!(
                "experiment `{}` does not sweep {}",
                base.experiment_id,
                parameter.name()
            )));
        }
        let configs = values
            .iter()
            .map(|v| base.at_sweep_point(v))
            .collect::<Result<Vec<_>>>()?;
        configs.iter().map(|c| self.run(c)).collect()
    }

    /// The two-phase initialization experiment with explicit phase lengths.
    pub fn run_init_finetune(
        &mut self,
        profile: Profile,
        case: FinetuneCase,
        phase1_epochs: usize,
        phase2_epochs: usize,
    ) -> Result<ExperimentResult> {
        if phase1_epochs == 0 || phase2_epochs == 0 {
            return Err(Error::InvalidArgument("each phase needs at least one epoch".into()));
        }
        let id = match case {
            FinetuneCase::CorrectLabels => "init-finetune-case1",
            FinetuneCase::ShiftedNegativeLabels => "init-finetune-case2",
        };
        let mut cfg = catalog::find(profile, id)?;
        for (p, n) in cfg.phases.iter_mut().zip([phase1_epochs, phase2_epochs]) {
            p.stop_rule = Some(crate::training::StopRule::FixedEpochs(n));
            p.max_epochs = Some(n);
        }
        self.run(&cfg)
    }
}

/// Runs `cfg` once with a fresh runner.
pub fn run_experiment(cfg: &ExperimentConfig, options: RunOptions, store: Option<ResultStore>) -> Result<ExperimentResult> {
    let mut runner = Runner::new(options);
    if let Some(s) = store {
        runner = runner.with_store(s);
    }
    runner.run(cfg)
}

type Log = Mutex<Option<BufWriter<File>>>;

fn run_seed(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    hash: &str,
    seed: u64,
    log: &Log,
    grid_dir: Option<&Path>,
    progress: bool,
) -> Result<RunResult> {
    let mut model: Option<Model> = None;
    let mut phases = Vec::new();
    let mut tracking = Vec::new();
    let mut offset = 0usize;
    for (phase, data) in cfg.phases.iter().zip(&prepared.phases) {
        let (train_set, val_set) = holdout_split(data, cfg.holdout_fraction, seed)?;
        let recipe = phase.recipe(&cfg.recipe, seed);
        let budget = recipe.epoch_budget();
        let mut observer = |rec: &EpochRecord, m: &Model| -> Result<()> {
            if let Some(w) = log.lock().expect("log lock").as_mut() {
                let line = serde_json::json!({
                    "experiment_id": cfg.experiment_id,
                    "seed": seed,
                    "phase": phase.name,
                    "record": rec,
                });
                serde_json::to_writer(&mut *w, &line)?;
                writeln!(w).map_err(|e| Error::io("training log", e))?;
                w.flush().map_err(|e| Error::io("training log", e))?;
            }
            if progress {
                eprintln!(
                    "{} seed {seed} {} epoch {}: train {:.4} val {} loss {:.4} ({:.0}s)",
                    cfg.experiment_id,
                    phase.name,
                    rec.epoch + 1,
                    rec.train_accuracy,
                    rec.validation_accuracy.map_or("-".into(), |v| format!("{v:.4}")),
                    rec.train_loss,
                    rec.seconds
                );
            }
            if let (Some(t), Some(ds)) = (&cfg.tracking, &prepared.tracking) {
                if rec.epoch.is_multiple_of(t.stride) || rec.epoch + 1 == budget {
                    let (regular_accuracy, negative_accuracy, kl) = paired_evaluation(m, ds)?;
                    tracking.push(TrackPoint {
                        phase: phase.name.clone(),
                        epoch: rec.epoch,
                        global_epoch: offset + rec.epoch,
                        regular_accuracy,
                        negative_accuracy,
                        mean_kl: kl.mean_kl,
                    });
                }
            }
            Ok(())
        };
        let ctx = TrainContext {
            log: None,
            observer: Some(&mut observer),
        };
        let (trained, history): (Model, TrainingHistory) = match &model {
            None => train(&prepared.spec, &train_set, &val_set, &recipe, ctx)?,
            Some(m) => finetune(m, &train_set, &val_set, &recipe, ctx)?,
        };
        offset += history.epochs.len();
        phases.push(PhaseResult {
            name: phase.name.clone(),
            train_images: train_set.len(),
            validation_images: val_set.len(),
            history,
        });
        model = Some(trained);
    }
    let model = model.expect("at least one phase");
    let mut evaluations = Vec::new();
    for (e, ds) in cfg.evaluations.iter().zip(&prepared.evaluations) {
        evaluations.push(evaluate_set(&model, e, ds)?);
    }
    let activation = match (&cfg.activation_probe, &prepared.probe) {
        (Some(a), Some((index, image))) => {
            let file = grid_dir.map(|d| d.join(format!("{}.{}.seed{seed}.{}.png", cfg.experiment_id, &hash[..8], a.layer)));
            let g = dump_activation_grid(&model, image, &a.layer, a.k, file.as_deref())?;
            Some(ActivationSummary {
                layer: a.layer.clone(),
                probe_index: *index,
                channels: g.channels,
                regular_bounds: g.regular_bounds,
                negative_bounds: g.negative_bounds,
                mean_relative_difference: g.mean_relative_difference,
                grid_file: file.and_then(|f| f.file_name().map(|n| format!("grids/{}", n.to_string_lossy()))),
            })
        }
        _ => None,
    };
    Ok(RunResult {
        seed,
        phases,
        evaluations,
        tracking,
        activation,
    })
}

fn kl_report(p: &crate::models::ProbabilityBatch, q: &crate::models::ProbabilityBatch) -> Result<KlReport> {
    let per_image_kl = p
        .rows()
        .zip(q.rows())
        .map(|(a, b)| kl_divergence(a, b))
        .collect::<Result<Vec<_>>>()?;
    let mean_kl = per_image_kl.iter().sum::<f64>() / per_image_kl.len() as f64;
    Ok(KlReport {
        per_image_kl,
        mean_kl,
        epsilon: KL_EPSILON,
    })
}

/// Accuracy on `ds`, on its negatives, and the KL between the two outputs.
pub fn paired_evaluation(model: &Model, ds: &LabeledDataset) -> Result<(f64, f64, KlReport)> {
    let p = model.predict(ds.images())?;
    let q = model.predict(&negate(ds.images()))?;
    Ok((
        accuracy_of(&p.argmax(), ds.labels())?,
        accuracy_of(&q.argmax(), ds.labels())?,
        kl_report(&p, &q)?,
    ))
}

fn evaluate_set(model: &Model, e: &super::config::EvalSet, ds: &LabeledDataset) -> Result<SetResult> {
    let p = model.predict(ds.images())?;
    let targets = match e.scoring {
        Some(kind) => {
            let map = LabelMap {
                kind,
                n_classes: ds.n_classes(),
            };
            ds.labels().iter().map(|&l| map.apply(l)).collect::<Result<Vec<_>>>()?
        }
        None => ds.labels().to_vec(),
    };
    let report = confusion_of(&p.argmax(), &targets, model.spec().n_classes as usize)?;
    let kl = if e.kl {
        Some(kl_report(&p, &model.predict(&negate(ds.images()))?)?)
    } else {
        None
    };
    Ok(SetResult {
        name: e.name.clone(),
        source: ds.source_tag().to_string(),
        n_images: ds.len(),
        scoring: e.scoring,
        shift1_mass: report.shifted_mass(1),
        report,
        kl,
    })
}
