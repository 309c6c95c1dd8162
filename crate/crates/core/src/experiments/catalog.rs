//! Named experiment templates.

use crate::datasets::{DatasetId, LabelMapKind, MixPolicy, Split};
use crate::error::{Error, Result};
use crate::models::Family;
use crate::training::{StopRule, TrainingRecipe};

use super::config::{
    ActivationProbe, ClassSet, DataExpr, EvalSet, ExclusionPart, ExperimentConfig, Group, ModelConfig, Phase,
    Profile, SweepParam, SweepSpec, SweepValue, Tracking,
};

pub const HOLDOUT_FRACTION: f64 = 0.2;
/// Classes run by the default class-exclusion gate.
pub const EXCL_SPOT_CHECK: [u32; 3] = [0, 4, 9];
pub const DESK_CIFAR_TRAIN: usize = 20_000;
const DESK_CIFAR_SEED: u64 = 1_000;
const SUBSET_SEED: u64 = 2_000;
const RANDOM_SEED: u64 = 3_000;
pub const RANDOM_COUNT: usize = 60_000;
pub const DIVERSITY_NEGATIVES: usize = 10_000;
pub const COUNT_SWEEP_VALUES: [usize; 5] = [0, 10, 100, 1_000, 10_000];

fn recipe(profile: Profile) -> TrainingRecipe {
    match profile {
        Profile::Paper => TrainingRecipe::default(),
        Profile::Desk => TrainingRecipe {
            max_epochs: 30,
            repetitions: 2,
            patience: Some(5),
            ..TrainingRecipe::default()
        },
    }
}

fn finetune_epochs(profile: Profile) -> usize {
    match profile {
        Profile::Paper => 100,
        Profile::Desk => 30,
    }
}

fn train_split(dataset: DatasetId, profile: Profile) -> DataExpr {
    let full = DataExpr::source(dataset, Split::Train);
    match (dataset, profile) {
        (DatasetId::Cifar10, Profile::Desk) => full.subset(ClassSet::All, DESK_CIFAR_TRAIN, DESK_CIFAR_SEED),
        _ => full,
    }
}

fn test_split(dataset: DatasetId) -> DataExpr {
    DataExpr::source(dataset, Split::Test)
}

/// Regular and negative test sets, with KL on the regular one.
fn standard_evals(dataset: DatasetId) -> Vec<EvalSet> {
    vec![
        EvalSet {
            kl: true,
            ..EvalSet::new("regular-test", test_split(dataset))
        },
        EvalSet::new("negative-test", test_split(dataset).negate()),
    ]
}

fn mnist_nine_probe() -> ActivationProbe {
    ActivationProbe {
        data: test_split(DatasetId::Mnist),
        label: 9,
        occurrence: 0,
        layer: "conv2".into(),
        k: 5,
    }
}

struct Builder {
    profile: Profile,
}

impl Builder {
    fn config(
        &self,
        id: String,
        description: String,
        group: Group,
        model: ModelConfig,
        train: DataExpr,
        evaluations: Vec<EvalSet>,
    ) -> ExperimentConfig {
        ExperimentConfig {
            experiment_id: id,
            description,
            group,
            profile: self.profile,
            model,
            recipe: recipe(self.profile),
            holdout_fraction: HOLDOUT_FRACTION,
            load_options: Default::default(),
            phases: vec![Phase::new("train", train)],
            evaluations,
            tracking: None,
            activation_probe: None,
            sweep: None,
            sweep_point: None,
        }
    }

    fn basic(&self, group: Group, dataset: DatasetId, family: Family, batch_norm: bool) -> ExperimentConfig {
        let p = self.profile;
        let regular = train_split(dataset, p);
        let (train, what) = match group {
            Group::E1 => (regular, "regular images only"),
            Group::E2 => (
                DataExpr::mix(vec![regular.clone(), regular.negate()], MixPolicy::MergedLabels),
                "regular and negative images, same labels",
            ),
            Group::E3 => (
                DataExpr::mix(
                    vec![regular.clone(), regular.negate().remap(LabelMapKind::Shift(1))],
                    MixPolicy::MergedLabels,
                ),
                "regular images plus negatives labeled (i+1) mod 10",
            ),
            _ => unreachable!("basic covers E1-E3"),
        };
        let mut evals = standard_evals(dataset);
        if group == Group::E3 {
            evals.push(EvalSet {
                scoring: Some(LabelMapKind::Shift(1)),
                ..EvalSet::new("negative-test-shifted", test_split(dataset).negate())
            });
        }
        let bn = if batch_norm { "" } else { "-nobn" };
        let tag = match group {
            Group::E1 => "e1",
            Group::E2 => "e2",
            _ => "e3",
        };
        let id = format!("{tag}-{dataset}-{}{bn}", family.name());
        let group = if batch_norm { group } else { Group::BnAblation };
        let mut cfg = self.config(
            id,
            format!(
                "{} on {dataset}{}: {what}",
                family.name(),
                if batch_norm { "" } else { " without batch norm" }
            ),
            group,
            ModelConfig::new(family, batch_norm),
            train,
            evals,
        );
        if tag == "e1" && dataset == DatasetId::Mnist && family == Family::Svgg && batch_norm {
            cfg.activation_probe = Some(mnist_nine_probe());
        }
        cfg
    }

    fn exclusion(&self, dataset: DatasetId, model: ModelConfig, excluded: u32) -> ExperimentConfig {
        let regular = train_split(dataset, self.profile);
        let mut evals = vec![EvalSet::new(
            "excluded-negative",
            regular.clone().exclusion(excluded, ExclusionPart::Probe),
        )];
        evals.extend(standard_evals(dataset));
        let mut id = format!("excl-{dataset}-{}", model.family.name());
        if !model.batch_norm {
            id.push_str("-nobn");
        }
        let group = if model.batch_norm && model.family == Family::Svgg {
            Group::Excl
        } else {
            Group::BnAblation
        };
        let mut cfg = self.config(
            format!("{id}-c{excluded}"),
            format!(
                "{} on {dataset}{}: all regular images plus negatives of every class but {excluded}",
                model.family.name(),
                if model.batch_norm { "" } else { " without batch norm" }
            ),
            group,
            model,
            regular.exclusion(excluded, ExclusionPart::Train),
            evals,
        );
        if dataset == DatasetId::Mnist && model == ModelConfig::new(Family::Svgg, true) && excluded == 9 {
            cfg.activation_probe = Some(mnist_nine_probe());
        }
        cfg
    }

    fn regularized(&self, l2: f32, dropout: f32) -> ExperimentConfig {
        let model = ModelConfig {
            l2_strength: l2,
            dropout_rate: dropout,
            ..ModelConfig::new(Family::Svgg, true)
        };
        let mut cfg = self.exclusion(DatasetId::Mnist, model, 9);
        cfg.group = Group::RegAblation;
        cfg.experiment_id = format!("reg-excl-mnist-c9-l2-{l2:e}-dropout-{dropout}");
        cfg.description = format!("class-exclusion on MNIST digit 9 with L2 {l2:e} and dropout {dropout}");
        cfg
    }

    fn diversity(&self) -> ExperimentConfig {
        let p = self.profile;
        let mnist = train_split(DatasetId::Mnist, p);
        let seen = vec![0, 1, 2, 3];
        let negatives = mnist
            .clone()
            .subset(ClassSet::Only(seen.clone()), DIVERSITY_NEGATIVES, SUBSET_SEED)
            .swept(SweepParam::DiversityClasses)
            .negate();
        let evals = vec![
            EvalSet::new(
                "excluded-negative",
                test_split(DatasetId::Mnist)
                    .classes(ClassSet::AllExcept(seen.clone()))
                    .swept(SweepParam::DiversityClasses)
                    .negate(),
            ),
            EvalSet::new(
                "common-excluded-negative",
                test_split(DatasetId::Mnist).classes(ClassSet::Only(vec![8, 9])).negate(),
            ),
            EvalSet::new("regular-test", test_split(DatasetId::Mnist)),
            EvalSet::new("negative-test", test_split(DatasetId::Mnist).negate()),
        ];
        let mut cfg = self.config(
            "diversity-mnist".into(),
            format!("svgg on all MNIST regular images plus {DIVERSITY_NEGATIVES} negatives drawn from a class subset"),
            Group::Diversity,
            ModelConfig::new(Family::Svgg, true),
            DataExpr::mix(vec![mnist, negatives], MixPolicy::MergedLabels),
            evals,
        );
        cfg.sweep = Some(SweepSpec {
            parameter: SweepParam::DiversityClasses,
            values: vec![SweepValue::Classes(seen), SweepValue::Classes((0..8).collect())],
        });
        cfg
    }

    fn notmnist_pairs(&self) -> DataExpr {
        let n = train_split(DatasetId::NotMnist, self.profile);
        DataExpr::mix(vec![n.clone(), n.negate()], MixPolicy::MergedLabels)
    }

    fn two_dataset(&self, distinct: bool) -> ExperimentConfig {
        let mnist = train_split(DatasetId::Mnist, self.profile);
        let (id, group, train, what) = if distinct {
            (
                "two-dataset-20",
                Group::TwoDataset20,
                DataExpr::mix(vec![mnist, self.notmnist_pairs()], MixPolicy::DistinctLabels),
                "20 labels: MNIST digits and notMNIST letters kept apart",
            )
        } else {
            (
                "two-dataset-10",
                Group::TwoDataset10,
                DataExpr::mix(vec![mnist, self.notmnist_pairs()], MixPolicy::MergedLabels),
                "10 labels: each notMNIST letter shares the label of a digit",
            )
        };
        self.config(
            id.into(),
            format!("svgg on MNIST regular images plus notMNIST regular and negative images, {what}"),
            group,
            ModelConfig::new(Family::Svgg, true),
            train,
            standard_evals(DatasetId::Mnist),
        )
    }

    /// Shares everything with `e1-mnist-svgg` apart from the notMNIST pairs.
    fn count_sweep(&self) -> ExperimentConfig {
        let mut cfg = self.basic(Group::E1, DatasetId::Mnist, Family::Svgg, true);
        let n = train_split(DatasetId::NotMnist, self.profile)
            .subset(ClassSet::All, 10_000, SUBSET_SEED)
            .swept(SweepParam::NegativeCount);
        let pairs = DataExpr::mix(vec![n.clone(), n.negate()], MixPolicy::MergedLabels);
        cfg.phases[0].train = DataExpr::mix(vec![cfg.phases[0].train.clone(), pairs], MixPolicy::DistinctLabels);
        cfg.experiment_id = "count-sweep-mnist".into();
        cfg.description =
            "svgg on MNIST regular images plus N notMNIST images and their negatives, 20 labels".into();
        cfg.group = Group::CountSweep;
        cfg.sweep = Some(SweepSpec {
            parameter: SweepParam::NegativeCount,
            values: COUNT_SWEEP_VALUES.iter().map(|&n| SweepValue::Count(n)).collect(),
        });
        cfg
    }

    fn random_images(&self) -> DataExpr {
        DataExpr::Random {
            n: RANDOM_COUNT,
            shape: DatasetId::Mnist.image_shape(),
            n_classes: 10,
            seed: RANDOM_SEED,
        }
    }

    fn random_aug(&self) -> ExperimentConfig {
        let r = self.random_images();
        let mut cfg = self.config(
            "random-aug".into(),
            "svgg on MNIST regular images plus uniform random images and their negatives, 10 shared labels".into(),
            Group::RandomAug,
            ModelConfig::new(Family::Svgg, true),
            DataExpr::mix(
                vec![train_split(DatasetId::Mnist, self.profile), r.clone(), r.negate()],
                MixPolicy::MergedLabels,
            ),
            standard_evals(DatasetId::Mnist),
        );
        cfg.recipe.stop_rule = StopRule::LastEpoch;
        cfg
    }

    fn random_neg(&self) -> ExperimentConfig {
        let r = self.random_images();
        let mut cfg = self.config(
            "random-neg".into(),
            "svgg on notMNIST regular and negative images plus uniform random images".into(),
            Group::RandomNeg,
            ModelConfig::new(Family::Svgg, true),
            DataExpr::mix(vec![self.notmnist_pairs(), r.clone()], MixPolicy::MergedLabels),
            vec![
                EvalSet::new("random-negative", r.clone().negate()),
                EvalSet::new("random-regular", r),
                EvalSet::new("regular-test", test_split(DatasetId::Mnist)),
                EvalSet::new("negative-test", test_split(DatasetId::Mnist).negate()),
            ],
        );
        cfg.recipe.stop_rule = StopRule::LastEpoch;
        cfg
    }

    fn init_finetune(&self, shifted: bool) -> ExperimentConfig {
        let n = train_split(DatasetId::NotMnist, self.profile);
        let negatives = if shifted {
            n.clone().negate().remap(LabelMapKind::Shift(1))
        } else {
            n.clone().negate()
        };
        let epochs = finetune_epochs(self.profile);
        let phase = |name: &str, train: DataExpr| Phase {
            stop_rule: Some(StopRule::FixedEpochs(epochs)),
            max_epochs: Some(epochs),
            ..Phase::new(name, train)
        };
        let case = if shifted { 2 } else { 1 };
        let mut cfg = self.config(
            format!("init-finetune-case{case}"),
            format!(
                "svgg trained {epochs} epochs on notMNIST regular and negative images{}, then {epochs} epochs on MNIST regular images",
                if shifted { " (negatives labeled (i+1) mod 10)" } else { "" }
            ),
            Group::InitFinetune,
            ModelConfig::new(Family::Svgg, true),
            DataExpr::Empty,
            standard_evals(DatasetId::Mnist),
        );
        cfg.phases = vec![
            phase("notmnist", DataExpr::mix(vec![n, negatives], MixPolicy::MergedLabels)),
            phase("mnist", train_split(DatasetId::Mnist, self.profile)),
        ];
        cfg.tracking = Some(Tracking {
            data: test_split(DatasetId::Mnist),
            stride: 1,
        });
        cfg
    }
}

/// Every experiment template for `profile`.
pub fn catalog(profile: Profile) -> Vec<ExperimentConfig> {
    let b = Builder { profile };
    let mut out = Vec::new();
    for group in [Group::E1, Group::E2, Group::E3] {
        for family in [Family::Svgg, Family::Mlp1, Family::Mlp2, Family::Softmax] {
            out.push(b.basic(group, DatasetId::Mnist, family, true));
        }
        out.push(b.basic(group, DatasetId::Cifar10, Family::Svgg, true));
    }
    for dataset in [DatasetId::Mnist, DatasetId::Cifar10] {
        out.push(b.basic(Group::E1, dataset, Family::Svgg, false));
    }
    out.push(b.basic(Group::E1, DatasetId::Mnist, Family::Mlp2, false));
    let excl_models = [
        (DatasetId::Mnist, ModelConfig::new(Family::Svgg, true)),
        (DatasetId::Cifar10, ModelConfig::new(Family::Svgg, true)),
        (DatasetId::Mnist, ModelConfig::new(Family::Svgg, false)),
        (DatasetId::Cifar10, ModelConfig::new(Family::Svgg, false)),
        (DatasetId::Mnist, ModelConfig::new(Family::Mlp2, true)),
        (DatasetId::Mnist, ModelConfig::new(Family::Mlp2, false)),
    ];
    for (dataset, model) in excl_models {
        for c in 0..10 {
            out.push(b.exclusion(dataset, model, c));
        }
    }
    out.push(b.diversity());
    out.push(b.two_dataset(true));
    out.push(b.count_sweep());
    out.push(b.two_dataset(false));
    out.push(b.random_aug());
    out.push(b.random_neg());
    out.push(b.init_finetune(false));
    out.push(b.init_finetune(true));
    for l2 in [0.0, 1e-4] {
        for dropout in [0.0, 0.5] {
            out.push(b.regularized(l2, dropout));
        }
    }
    out
}

/// Looks up a template by id. A bare `e1-mnist` style id means the sVGG variant.
pub fn find(profile: Profile, id: &str) -> Result<ExperimentConfig> {
    let all = catalog(profile);
    let short = format!("{id}-svgg");
    all.iter()
        .find(|c| c.experiment_id == id)
        .or_else(|| all.iter().find(|c| c.experiment_id == short))
        .cloned()
        .ok_or_else(|| Error::UnknownExperiment(id.to_string()))
}
