//! Mini-batch SGD with holdout-based checkpoint selection.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::models::{build_model, Model, ModelSpec};
use crate::nn::{softmax_cross_entropy, Act, Sgd, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Highest validation accuracy among epochs with 100% training accuracy;
    /// the final epoch if none reaches it.
    BestValWithFullTrainAcc,
    FixedEpochs(usize),
    LastEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecipe {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub stop_rule: StopRule,
    pub repetitions: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle_each_epoch: bool,
    /// Under `best_val_with_full_train_acc`, stop once training accuracy is
    /// 100% and validation accuracy has not improved for this many epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl Default for TrainingRecipe {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 128,
            max_epochs: 500,
            stop_rule: StopRule::BestValWithFullTrainAcc,
            repetitions: 5,
            seed: 0,
            shuffle_each_epoch: true,
            patience: None,
        }
    }
}

impl TrainingRecipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be nonnegative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.stop_rule == StopRule::FixedEpochs(0) {
            return bad("fixed_epochs needs at least 1 epoch".into());
        }
        Ok(())
    }

    /// Number of epochs the loop may run.
    pub fn epoch_budget(&self) -> usize {
        match self.stop_rule {
            StopRule::FixedEpochs(n) => n,
            _ => self.max_epochs,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Zero-based.
    pub epoch: usize,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
    pub train_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub wall_time_seconds: f64,
}

impl TrainingHistory {
    pub fn selected(&self) -> &EpochRecord {
        &self.epochs[self.selected_epoch]
    }
}

/// Which recorded epoch the rule selects, or `None` for an empty history.
pub fn select_epoch(rule: StopRule, epochs: &[EpochRecord]) -> Option<usize> {
    let last = epochs.len().checked_sub(1)?;
    match rule {
        StopRule::LastEpoch => Some(last),
        StopRule::FixedEpochs(n) => Some(n.min(epochs.len()) - 1),
        StopRule::BestValWithFullTrainAcc => {
            let mut best: Option<(usize, f64)> = None;
            for e in epochs.iter().filter(|e| e.train_accuracy >= 1.0) {
                let v = e.validation_accuracy.unwrap_or(0.0);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((e.epoch, v));
                }
            }
            Some(best.map_or(last, |(i, _)| i))
        }
    }
}

/// Called after each epoch with the current (not the selected) model.
pub type EpochObserver<'a> = dyn FnMut(&EpochRecord, &Model) -> Result<()> + 'a;

/// Hooks into the epoch loop.
#[derive(Default)]
pub struct TrainContext<'a> {
    /// Receives one JSON object per epoch.
    pub log: Option<&'a mut dyn Write>,
    pub observer: Option<&'a mut EpochObserver<'a>>,
}

/// Trains a freshly built model initialized from `recipe.seed`.
pub fn train(
    spec: &ModelSpec,
    train: &LabeledDataset,
    val: &LabeledDataset,
    recipe: &TrainingRecipe,
    ctx: TrainContext<'_>,
) -> Result<(Model, TrainingHistory)> {
    let model = build_model(spec, recipe.seed)?;
    fit(model, train, val, recipe, ctx)
}

/// Continues from `model`'s weights with a fresh optimizer.
pub fn finetune(
    model: &Model,
    train: &LabeledDataset,
    val: &LabeledDataset,
    recipe: &TrainingRecipe,
    ctx: TrainContext<'_>,
) -> Result<(Model, TrainingHistory)> {
    fit(model.clone(), train, val, recipe, ctx)
}

/// Mini-batches of the permutation; a trailing single example is folded into
/// the previous batch so batch statistics are always defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = order.len() - size - 1;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

fn fit(
    mut model: Model,
    train: &LabeledDataset,
    val: &LabeledDataset,
    recipe: &TrainingRecipe,
    mut ctx: TrainContext<'_>,
) -> Result<(Model, TrainingHistory)> {
    recipe.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "training set `{}` is empty",
            train.source_tag()
        )));
    }
    let n_classes = model.spec().n_classes;
    for ds in [train, val] {
        if ds.n_classes() > n_classes {
            return Err(Error::InvalidArgument(format!(
                "dataset `{}` has {} classes, model has {n_classes}",
                ds.source_tag(),
                ds.n_classes()
            )));
        }
    }
    let start = Instant::now();
    let mut opt = Sgd::new(SgdConfig {
        learning_rate: recipe.learning_rate,
        momentum: recipe.momentum,
        weight_decay: model.spec().l2_strength,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let classes = n_classes as usize;
    let mut history = Vec::new();
    let mut best: Option<(f64, crate::models::Snapshot)> = None;
    let mut since_best = 0usize;
    let tracks_best = recipe.stop_rule == StopRule::BestValWithFullTrainAcc;

    for epoch in 0..recipe.epoch_budget() {
        let t0 = Instant::now();
        if epoch > 0 && recipe.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0f64;
        for idx in batches(&order, recipe.batch_size) {
            let x = model.input_act(train.images(), idx);
            let labels: Vec<u32> = idx.iter().map(|&i| train.labels()[i]).collect();
            let logits = model.forward_train(x);
            let (loss, grad) = softmax_cross_entropy(&logits.data, &labels, classes);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss * idx.len() as f64;
            model.backward(Act::new(idx.len(), 1, 1, classes, grad));
            opt.step(model.params_mut());
        }
        model.clear_cache();
        let train_loss = loss_sum / train.len() as f64;
        let train_accuracy = accuracy(&model, train)?;
        let validation_accuracy = if val.is_empty() {
            None
        } else {
            Some(accuracy(&model, val)?)
        };
        let record = EpochRecord {
            epoch,
            train_accuracy,
            validation_accuracy,
            train_loss,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(log) = ctx.log.as_deref_mut() {
            serde_json::to_writer(&mut *log, &record)?;
            writeln!(log).map_err(|e| Error::io("training log", e))?;
        }
        if let Some(obs) = ctx.observer.as_deref_mut() {
            obs(&record, &model)?;
        }
        history.push(record);

        if tracks_best && train_accuracy >= 1.0 {
            let v = validation_accuracy.unwrap_or(0.0);
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, model.snapshot()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            // Nothing later can be selected over a perfect score (ties keep the earliest).
            if v >= 1.0 || recipe.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }

    let selected_epoch = select_epoch(recipe.stop_rule, &history).expect("at least one epoch");
    if let Some((_, snap)) = &best {
        if selected_epoch != history.len() - 1 {
            model.restore(snap);
        }
    }
    Ok((
        model,
        TrainingHistory {
            epochs: history,
            selected_epoch,
            wall_time_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Mean and sample standard deviation of per-run values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub values: Vec<f64>,
    pub mean: f64,
    /// `None` with fewer than two runs.
    pub std: Option<f64>,
}

impl Aggregate {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("aggregate of zero runs".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        Ok(Self { values, mean, std })
    }
}

/// Runs `job` with seeds `seed, seed + 1, ..`; a failure names its seed.
pub fn run_repeated<T>(
    seed: u64,
    repetitions: usize,
    mut job: impl FnMut(u64) -> Result<T>,
) -> Result<Vec<T>> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be at least 1".into()));
    }
    (0..repetitions as u64)
        .map(|i| {
            let s = seed + i;
            job(s).map_err(|e| Error::SeedFailed {
                seed: s,
                source: Box::new(e),
            })
        })
        .collect()
}
