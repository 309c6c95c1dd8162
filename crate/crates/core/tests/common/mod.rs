#![allow(dead_code)]

use std::fs;
use std::path::Path;

fn idx(path: &Path, dims: &[u32], data: &[u8]) {
    let mut bytes = vec![0, 0, 8, dims.len() as u8];
    for d in dims {
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend_from_slice(data);
    fs::write(path, bytes).unwrap();
}

/// MNIST-format files where class `c` is a bright bar on rows `2c+4..2c+6`.
pub fn fake_mnist(root: &Path, n_train: usize, n_test: usize) {
    let dir = root.join("mnist");
    fs::create_dir_all(&dir).unwrap();
    let mut state = 0x2545_f491_u32;
    let mut noise = move |hi: u32| {
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        (state % hi) as u8
    };
    for (stem, n) in [("train", n_train), ("t10k", n_test)] {
        let mut images = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 10;
            labels.push(c as u8);
            for y in 0..28 {
                for _ in 0..28 {
                    let bar = y >= 2 * c + 4 && y < 2 * c + 6;
                    images.push(if bar { 200 + noise(56) } else { noise(40) });
                }
            }
        }
        idx(&dir.join(format!("{stem}-images-idx3-ubyte")), &[n as u32, 28, 28], &images);
        idx(&dir.join(format!("{stem}-labels-idx1-ubyte")), &[n as u32], &labels);
    }
}

/// Two phases, tracking, a shifted-label evaluation and an activation probe,
/// so one result exercises every part of the schema.
pub const FULL_CONFIG: &str = r#"{
  "experiment_id": "schema-sample",
  "description": "small sVGG run covering every result field",
  "group": "CUSTOM",
  "profile": "desk",
  "model": { "family": "svgg", "batch_norm": true },
  "recipe": {
    "learning_rate": 0.01, "momentum": 0.9, "batch_size": 20, "max_epochs": 2,
    "stop_rule": "best_val_with_full_train_acc", "repetitions": 2, "seed": 11
  },
  "holdout_fraction": 0.2,
  "phases": [
    {
      "name": "negatives",
      "train": { "op": "negate", "of": { "op": "source", "dataset": "mnist", "split": "train" } },
      "stop_rule": { "fixed_epochs": 1 },
      "max_epochs": 1
    },
    { "name": "regular", "train": { "op": "source", "dataset": "mnist", "split": "train" } }
  ],
  "evaluations": [
    { "name": "regular-test", "data": { "op": "source", "dataset": "mnist", "split": "test" }, "kl": true },
    { "name": "negative-test", "data": { "op": "negate", "of": { "op": "source", "dataset": "mnist", "split": "test" } } },
    {
      "name": "negative-test-shifted",
      "data": { "op": "negate", "of": { "op": "source", "dataset": "mnist", "split": "test" } },
      "scoring": { "shift": 1 }
    }
  ],
  "tracking": { "data": { "op": "source", "dataset": "mnist", "split": "test" }, "stride": 1 },
  "activation_probe": {
    "data": { "op": "source", "dataset": "mnist", "split": "test" },
    "label": 9, "layer": "conv2", "k": 5
  }
}"#;

/// An MLP config that trains in well under a second.
pub const TINY_CONFIG: &str = r#"{
  "experiment_id": "tiny",
  "description": "one-layer MLP on synthetic bars",
  "group": "CUSTOM",
  "profile": "desk",
  "model": { "family": "mlp1", "batch_norm": true },
  "recipe": {
    "learning_rate": 0.05, "momentum": 0.9, "batch_size": 16, "max_epochs": 2,
    "stop_rule": "last_epoch", "repetitions": 2, "seed": 3
  },
  "holdout_fraction": 0.2,
  "phases": [ { "name": "train", "train": { "op": "source", "dataset": "mnist", "split": "train" } } ],
  "evaluations": [
    { "name": "regular-test", "data": { "op": "source", "dataset": "mnist", "split": "test" }, "kl": true },
    { "name": "negative-test", "data": { "op": "negate", "of": { "op": "source", "dataset": "mnist", "split": "test" } } }
  ]
}"#;
