//! Golden files. Regenerate with `SHAPEBIAS_BLESS=1 cargo test --test golden`.

mod common;

use std::fs;
use std::path::{Path, PathBuf};

use shapebias::experiments::{ExperimentConfig, RunOptions, Runner};
use shapebias::models::{build_model, Family, ModelSpec};
use shapebias::report::load_result;

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn bless() -> bool {
    std::env::var("SHAPEBIAS_BLESS").is_ok_and(|v| v == "1")
}

#[test]
fn svgg_layer_list() {
    let mut spec = ModelSpec::new(Family::Svgg, (28, 28, 1), 10);
    spec.batch_norm = false;
    let plain = build_model(&spec, 0).unwrap().describe();
    let path = golden("svgg_layers.txt");
    if bless() {
        fs::write(&path, plain.join("\n") + "\n").unwrap();
    }
    let want: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    assert_eq!(plain, want);
    // With batch norm, the only change is a BN layer in front of every ReLU.
    spec.batch_norm = true;
    let with_bn = build_model(&spec, 0).unwrap().describe();
    let mut expected = Vec::new();
    for layer in want {
        if layer == "ReLU" {
            expected.push("BN".to_string());
        }
        expected.push(layer);
    }
    assert_eq!(with_bn, expected);
}

#[test]
fn result_schema_fixture() {
    let path = golden("result.json");
    if bless() {
        let dir = tempfile::tempdir().unwrap();
        common::fake_mnist(dir.path(), 100, 30);
        let cfg = ExperimentConfig::from_json(common::FULL_CONFIG).unwrap();
        let mut r = Runner::new(RunOptions::new(dir.path())).run(&cfg).unwrap();
        r.provenance.data_root = "data".into();
        for run in &mut r.runs {
            for e in &mut run.evaluations {
                if let Some(kl) = &mut e.kl {
                    kl.per_image_kl.truncate(3);
                }
            }
        }
        fs::write(&path, serde_json::to_string_pretty(&r).unwrap() + "\n").unwrap();
    }
    let r = load_result(&path).unwrap();
    let on_disk: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let again: serde_json::Value = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(again, on_disk);
    assert_eq!(r.config.config_hash(), r.config_hash);
    assert!(r.is_complete());
    for key in [
        "regular-test.accuracy",
        "regular-test.mean_kl",
        "negative-test-shifted.accuracy",
        "negative-test.class9.accuracy",
        "regular.train_accuracy",
        "negatives.selected_epoch",
        "activation.mean_relative_difference",
    ] {
        assert!(r.aggregate(key).is_some(), "missing {key}");
    }
    assert_eq!(r.tracking.len(), 3);
}
