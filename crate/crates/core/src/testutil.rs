//! Tiny synthetic MNIST-format data roots for tests.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::{DatasetId, Split};
use crate::experiments::{
    DataExpr, EvalSet, ExperimentConfig, ExperimentResult, Group, ModelConfig, Phase, Profile, RunOptions, Runner,
};
use crate::models::Family;
use crate::training::{StopRule, TrainingRecipe};

fn idx(path: &Path, dims: &[u32], data: &[u8]) {
    let mut bytes = vec![0, 0, 8, dims.len() as u8];
    for d in dims {
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend_from_slice(data);
    fs::write(path, bytes).unwrap();
}

/// Writes `mnist/` IDX files where class `c` is a bright bar on rows `2c+4..2c+6` over noise.
pub(crate) fn fake_mnist(root: &Path, n_train: usize, n_test: usize) {
    let dir = root.join("mnist");
    fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (stem, n) in [("train", n_train), ("t10k", n_test)] {
        let mut images = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = (i % 10) as u8;
            labels.push(c);
            for y in 0..28 {
                for _ in 0..28 {
                    let bar = y >= 2 * c as usize + 4 && y < 2 * c as usize + 6;
                    images.push(if bar { rng.gen_range(200..=255) } else { rng.gen_range(0..40) });
                }
            }
        }
        idx(&dir.join(format!("{stem}-images-idx3-ubyte")), &[n as u32, 28, 28], &images);
        idx(&dir.join(format!("{stem}-labels-idx1-ubyte")), &[n as u32], &labels);
    }
}

/// An MLP config over the synthetic MNIST: 3 epochs, 2 seeds.
pub(crate) fn tiny(id: &str) -> ExperimentConfig {
    let train = DataExpr::source(DatasetId::Mnist, Split::Train);
    let test = DataExpr::source(DatasetId::Mnist, Split::Test);
    let mut regular = EvalSet::new("regular-test", test.clone());
    regular.kl = true;
    ExperimentConfig {
        experiment_id: id.into(),
        description: "tiny".into(),
        group: Group::Custom,
        profile: Profile::Desk,
        model: ModelConfig::new(Family::Mlp1, true),
        recipe: TrainingRecipe {
            learning_rate: 0.05,
            batch_size: 16,
            max_epochs: 3,
            stop_rule: StopRule::LastEpoch,
            repetitions: 2,
            seed: 5,
            ..TrainingRecipe::default()
        },
        holdout_fraction: 0.2,
        load_options: Default::default(),
        phases: vec![Phase::new("train", train)],
        evaluations: vec![regular, EvalSet::new("negative-test", test.negate())],
        tracking: None,
        activation_probe: None,
        sweep: None,
        sweep_point: None,
    }
}

/// A real (tiny) result, trained on a fresh synthetic root.
pub(crate) fn tiny_result(id: &str) -> ExperimentResult {
    let dir = tempfile::tempdir().unwrap();
    fake_mnist(dir.path(), 100, 30);
    Runner::new(RunOptions::new(dir.path())).run(&tiny(id)).unwrap()
}
