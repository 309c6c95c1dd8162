//! Acceptance gate. Prints one line per criterion.
//!
//! The property criteria (P1-P7) always run. The quantitative criteria read
//! desk-profile results from a store (`SHAPEBIAS_ACCEPTANCE_RESULTS`, default
//! `<workspace>/results`); a criterion whose results are missing prints
//! SKIPPED, unless `SHAPEBIAS_ACCEPTANCE_RUN=1` asks for them to be trained.
//! Only results whose config hash matches the current catalog template count.
//!
//! Exit status: nonzero if a property criterion fails, or if any criterion
//! fails under `SHAPEBIAS_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use shapebias::datasets::{
    exclusion_split, load_dataset, negate, remap_labels, DatasetId, ImageBatch, LabelMap, LoadOptions,
    Split,
};
use shapebias::experiments::{
    find, ExperimentConfig, ExperimentResult, Profile, RunOptions, Runner, SweepValue,
};
use shapebias::metrics::kl_divergence;
use shapebias::report::{load_result, ResultStore};
use shapebias::training::{select_epoch, EpochRecord, StopRule};

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Skipped,
}

struct Line {
    id: &'static str,
    status: Status,
    detail: String,
}

fn workspace() -> PathBuf {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    p.canonicalize().unwrap_or(p)
}

fn data_root() -> PathBuf {
    std::env::var_os("SHAPEBIAS_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data"))
}

fn results_root() -> PathBuf {
    std::env::var_os("SHAPEBIAS_ACCEPTANCE_RESULTS")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("results"))
}

fn flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1")
}

/// A sub-check: label, measured value, and whether it holds.
struct Check(String, bool);

fn judge(id: &'static str, checks: Vec<Check>) -> Line {
    let ok = checks.iter().all(|c| c.1);
    let detail = checks
        .iter()
        .map(|c| format!("{}{}", if c.1 { "" } else { "NOT " }, c.0))
        .collect::<Vec<_>>()
        .join("; ");
    Line {
        id,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn skipped(id: &'static str, why: String) -> Line {
    Line {
        id,
        status: Status::Skipped,
        detail: why,
    }
}

// ---------------------------------------------------------------- results

struct Results {
    store: Option<ResultStore>,
    loaded: Vec<ExperimentResult>,
    train_missing: bool,
}

impl Results {
    fn open(root: &Path) -> Self {
        let store = root.is_dir().then(|| ResultStore::open(root).ok()).flatten();
        let loaded = store
            .as_ref()
            .and_then(|s| s.load_all().ok())
            .unwrap_or_default();
        Self {
            store,
            loaded,
            train_missing: flag("SHAPEBIAS_ACCEPTANCE_RUN"),
        }
    }

    /// Newest complete result computed from exactly `cfg`.
    fn get(&mut self, cfg: &ExperimentConfig) -> Result<ExperimentResult, String> {
        let hash = cfg.config_hash();
        if let Some(r) = self
            .loaded
            .iter()
            .rev()
            .find(|r| r.experiment_id == cfg.experiment_id && r.config_hash == hash && r.is_complete())
        {
            return Ok(r.clone());
        }
        if !self.train_missing {
            let point = cfg.sweep_point.as_ref().map_or(String::new(), |p| format!(" at {}={}", p.parameter.name(), p.value));
            return Err(format!("no stored desk result for {}{} ({})", cfg.experiment_id, point, &hash[..8]));
        }
        let store = match &self.store {
            Some(s) => s.clone(),
            None => ResultStore::open(results_root()).map_err(|e| e.to_string())?,
        };
        let mut options = RunOptions::new(data_root());
        options.artifact_dir = Some(store.root().to_path_buf());
        let r = Runner::new(options)
            .with_store(store.clone())
            .run(cfg)
            .map_err(|e| e.to_string())?;
        self.store = Some(store);
        self.loaded.push(r.clone());
        Ok(r)
    }

    fn catalog(&mut self, id: &str) -> Result<ExperimentResult, String> {
        let cfg = find(Profile::Desk, id).map_err(|e| e.to_string())?;
        self.get(&cfg)
    }

    fn at(&mut self, id: &str, value: SweepValue) -> Result<ExperimentResult, String> {
        let cfg = find(Profile::Desk, id)
            .and_then(|c| c.at_sweep_point(&value))
            .map_err(|e| e.to_string())?;
        self.get(&cfg)
    }
}

fn mean(r: &ExperimentResult, key: &str) -> f64 {
    r.aggregate(key)
        .unwrap_or_else(|| panic!("{} has no aggregate {key}", r.experiment_id))
        .mean
}

macro_rules! need {
    ($id:expr, $e:expr) => {
        match $e {
            Ok(v) => v,
            Err(why) => return skipped($id, why),
        }
    };
}

fn at_least(label: &str, v: f64, bound: f64) -> Check {
    Check(format!("{label} {v:.4} >= {bound}"), v >= bound)
}

fn at_most(label: &str, v: f64, bound: f64) -> Check {
    Check(format!("{label} {v:.4} <= {bound}"), v <= bound)
}

fn c1(rs: &mut Results) -> Line {
    let r = need!("1", rs.catalog("e1-mnist-svgg"));
    let (reg, neg) = (mean(&r, "regular-test.accuracy"), mean(&r, "negative-test.accuracy"));
    judge(
        "1",
        vec![
            at_least("regular", reg, 0.985),
            at_most("negative", neg, 0.55),
            at_least("gap", reg - neg, 0.40),
        ],
    )
}

fn c2(rs: &mut Results) -> Line {
    let r = need!("2", rs.catalog("e1-mnist-svgg-nobn"));
    judge(
        "2",
        vec![
            at_most("negative", mean(&r, "negative-test.accuracy"), 0.35),
            at_least("regular", mean(&r, "regular-test.accuracy"), 0.98),
        ],
    )
}

fn c3(rs: &mut Results) -> Line {
    let r = need!("3", rs.catalog("e2-mnist-svgg"));
    let (reg, neg) = (mean(&r, "regular-test.accuracy"), mean(&r, "negative-test.accuracy"));
    judge(
        "3",
        vec![
            at_least("regular", reg, 0.985),
            at_least("negative", neg, 0.985),
            at_most("|regular-negative|", (reg - neg).abs(), 0.01),
        ],
    )
}

fn c4(rs: &mut Results) -> Line {
    let r = need!("4", rs.catalog("e3-mnist-svgg"));
    let train = r.aggregate("train.train_accuracy").map(|a| a.values.clone()).unwrap_or_default();
    judge(
        "4",
        vec![
            at_least("regular", mean(&r, "regular-test.accuracy"), 0.985),
            at_most("negative (original labels)", mean(&r, "negative-test.accuracy"), 0.05),
            at_least("negative (shift 1)", mean(&r, "negative-test-shifted.accuracy"), 0.985),
            Check(format!("train accuracy {train:?} all 1.0"), !train.is_empty() && train.iter().all(|&v| v == 1.0)),
        ],
    )
}

fn excl_mean(rs: &mut Results, prefix: &str, classes: &[u32]) -> Result<f64, String> {
    let mut sum = 0.0;
    for c in classes {
        sum += mean(&rs.catalog(&format!("{prefix}-c{c}"))?, "excluded-negative.accuracy");
    }
    Ok(sum / classes.len() as f64)
}

fn c5(rs: &mut Results) -> Line {
    let spot = shapebias::experiments::EXCL_SPOT_CHECK;
    let bn = need!("5", excl_mean(rs, "excl-mnist-svgg", &spot));
    let nobn = need!("5", excl_mean(rs, "excl-mnist-svgg-nobn", &spot));
    let mlp = need!("5", excl_mean(rs, "excl-mnist-mlp2", &spot));
    let mut checks = vec![
        at_least("BN on, classes {0,4,9}", bn, 0.90),
        at_most("BN off", nobn, 0.10),
        at_most("MLP2 with BN", mlp, 0.10),
    ];
    // The full ten-class cycle, when it has been run, must meet the same band.
    let all: Vec<u32> = (0..10).collect();
    let saved = rs.train_missing;
    rs.train_missing = false;
    if let Ok(full) = excl_mean(rs, "excl-mnist-svgg", &all) {
        checks.push(at_least("BN on, all ten classes", full, 0.90));
    }
    rs.train_missing = saved;
    judge("5", checks)
}

fn c6(rs: &mut Results) -> Line {
    let ten = need!("6", rs.catalog("two-dataset-10"));
    let twenty = need!("6", rs.catalog("two-dataset-20"));
    judge(
        "6",
        vec![
            at_least("TWO_DATASET_10 negative", mean(&ten, "negative-test.accuracy"), 0.97),
            at_least("TWO_DATASET_20 negative", mean(&twenty, "negative-test.accuracy"), 0.97),
        ],
    )
}

fn c7(rs: &mut Results) -> Line {
    let mut acc = |n: usize| rs.at("count-sweep-mnist", SweepValue::Count(n)).map(|r| mean(&r, "negative-test.accuracy"));
    let n0 = need!("7", acc(0));
    let n10 = need!("7", acc(10));
    let n100 = need!("7", acc(100));
    let n10k = need!("7", acc(10_000));
    judge(
        "7",
        vec![
            at_least("N=10000", n10k, 0.95),
            at_most("N=10", n10, 0.15),
            at_most("N=100", n100, 0.15),
            Check(format!("N=10000 {n10k:.4} > N=0 {n0:.4}"), n10k > n0),
        ],
    )
}

fn c8(rs: &mut Results) -> Line {
    let narrow = need!("8", rs.at("diversity-mnist", SweepValue::Classes(vec![0, 1, 2, 3])));
    let wide = need!("8", rs.at("diversity-mnist", SweepValue::Classes((0..8).collect())));
    let (a, b) = (
        mean(&narrow, "common-excluded-negative.accuracy"),
        mean(&wide, "common-excluded-negative.accuracy"),
    );
    let mut checks = vec![Check(format!("classes 0-7 {b:.4} > classes 0-3 {a:.4} on negatives of 8,9"), b > a)];
    let (own_a, own_b) = (
        mean(&narrow, "excluded-negative.accuracy"),
        mean(&wide, "excluded-negative.accuracy"),
    );
    checks.push(Check(
        format!("(info) own excluded classes: 0-7 {own_b:.4}, 0-3 {own_a:.4}"),
        true,
    ));
    judge("8", checks)
}

fn kl_at_phase_end(r: &ExperimentResult, phase: &str) -> Option<f64> {
    r.tracking.iter().rfind(|t| t.phase == phase).map(|t| t.mean_kl.mean)
}

fn c9(rs: &mut Results) -> Line {
    let one = need!("9", rs.catalog("init-finetune-case1"));
    let two = need!("9", rs.catalog("init-finetune-case2"));
    let mut checks = vec![
        at_least("case 1 negative", mean(&one, "negative-test.accuracy"), 0.88),
        at_most("case 2 negative", mean(&two, "negative-test.accuracy"), 0.45),
    ];
    for phase in ["mnist", "notmnist"] {
        match (kl_at_phase_end(&one, phase), kl_at_phase_end(&two, phase)) {
            (Some(a), Some(b)) => checks.push(Check(format!("D at end of {phase} phase: case 1 {a:.4} < case 2 {b:.4}"), a < b)),
            _ => checks.push(Check(format!("D tracked through the {phase} phase"), false)),
        }
    }
    judge("9", checks)
}

fn c10(rs: &mut Results) -> Line {
    let aug = need!("10", rs.catalog("random-aug"));
    let neg = need!("10", rs.catalog("random-neg"));
    let r = mean(&neg, "random-negative.accuracy");
    judge(
        "10",
        vec![
            at_most("RANDOM_AUG MNIST negative", mean(&aug, "negative-test.accuracy"), 0.45),
            Check(format!("RANDOM_NEG random negatives {r:.4} in [0.05, 0.15]"), (0.05..=0.15).contains(&r)),
        ],
    )
}

fn c11(rs: &mut Results) -> Line {
    let e1 = need!("11", rs.catalog("e1-cifar10-svgg"));
    let e2 = need!("11", rs.catalog("e2-cifar10-svgg"));
    let e3 = need!("11", rs.catalog("e3-cifar10-svgg"));
    let acc = |r: &ExperimentResult, k: &str| mean(r, &format!("{k}.accuracy"));
    let (r1, n1) = (acc(&e1, "regular-test"), acc(&e1, "negative-test"));
    let (r2, n2) = (acc(&e2, "regular-test"), acc(&e2, "negative-test"));
    let (r3, n3, s3) = (acc(&e3, "regular-test"), acc(&e3, "negative-test"), acc(&e3, "negative-test-shifted"));
    judge(
        "11",
        vec![
            at_least("E1 regular", r1, 0.65),
            at_least("E1 gap", r1 - n1, 0.25),
            at_most("E2 |regular-negative|", (r2 - n2).abs(), 0.05),
            at_most("E3 negative (original labels)", n3, 0.10),
            at_most("E3 |shifted-regular|", (s3 - r3).abs(), 0.05),
        ],
    )
}

// ------------------------------------------------------------- properties

fn batch_strategy() -> impl Strategy<Value = ImageBatch> {
    (1usize..4, 1usize..6, 1usize..6, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(n, h, w, c)| {
        proptest::collection::vec(any::<u8>(), n * h * w * c)
            .prop_map(move |levels| ImageBatch::new(n, h, w, c, levels).expect("valid batch"))
    })
}

fn run_prop<S: Strategy>(cases: u32, s: S, f: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&s, f).map_err(|e| e.to_string())
}

fn p1() -> Line {
    let r = run_prop(1000, batch_strategy(), |b| {
        let n = negate(&b);
        prop_assert_eq!(n.image_shape(), b.image_shape());
        prop_assert_eq!(n.len(), b.len());
        for i in 0..b.levels().len() {
            let v = n.value(i);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - (1.0 - b.value(i))).abs() < 1e-6);
        }
        prop_assert_eq!(negate(&n), b);
        Ok(())
    });
    match r {
        Ok(()) => judge("P1", vec![Check("1000 random batches: involution, range and shape hold".into(), true)]),
        Err(e) => judge("P1", vec![Check(e, false)]),
    }
}

fn p2() -> Line {
    let mut checks = Vec::new();
    for n in 2u32..=10 {
        let labels: Vec<u32> = (0..3 * n).map(|i| i % n).collect();
        let images = ImageBatch::new(labels.len(), 1, 1, 1, vec![0; labels.len()]).unwrap();
        let names = (0..n).map(|i| i.to_string()).collect();
        let ds = shapebias::datasets::LabeledDataset::new(images, labels.clone(), n, names, "p2").unwrap();
        let shift = LabelMap::shift(1, n);
        let image: BTreeSet<u32> = (0..n).map(|l| shift.apply(l).unwrap()).collect();
        let mut cur = ds.clone();
        let mut back_at = None;
        for k in 1..=n {
            cur = remap_labels(&cur, &shift).unwrap();
            if cur.labels() == ds.labels() {
                back_at = Some(k);
                break;
            }
        }
        checks.push(Check(
            format!("n={n}: bijective={} order={back_at:?}", image.len() == n as usize),
            image.len() == n as usize && back_at == Some(n),
        ));
    }
    let ok = checks.iter().all(|c| c.1);
    let failed: Vec<Check> = checks.into_iter().filter(|c| !c.1).collect();
    if ok {
        judge("P2", vec![Check("shift(1) is a bijection of order n for n in 2..=10".into(), true)])
    } else {
        judge("P2", failed)
    }
}

fn p3() -> Line {
    let ln2 = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
    let want2 = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    let mixed = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
    let same = kl_divergence(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap();
    let simplex = (2usize..11).prop_flat_map(|k| {
        (
            proptest::collection::vec(0.0f32..1.0, k),
            proptest::collection::vec(0.0f32..1.0, k),
        )
    });
    let norm = |v: Vec<f32>| {
        let s: f32 = v.iter().sum();
        if s == 0.0 {
            vec![1.0 / v.len() as f32; v.len()]
        } else {
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        }
    };
    let nonneg = run_prop(10_000, simplex, |(p, q)| {
        let d = kl_divergence(&norm(p), &norm(q)).unwrap();
        prop_assert!(d >= 0.0, "negative KL {}", d);
        Ok(())
    });
    judge(
        "P3",
        vec![
            Check(format!("identical -> {same:e}"), same == 0.0),
            Check(format!("(1,0)||(.5,.5) = {ln2:.12} vs ln 2"), (ln2 - 2f64.ln()).abs() < 1e-9),
            Check(format!("(.5,.5)||(.25,.75) = {mixed:.12} vs {want2:.12}"), (mixed - want2).abs() < 1e-9),
            Check(
                format!("10000 random simplex pairs nonnegative{}", nonneg.as_ref().err().map_or(String::new(), |e| format!(": {e}"))),
                nonneg.is_ok(),
            ),
        ],
    )
}

/// Independent statement of the rule: maximal validation accuracy among
/// epochs at 100% training accuracy, earliest on ties, else the last epoch.
fn oracle_epoch(h: &[(f64, f64)]) -> usize {
    let full: Vec<usize> = (0..h.len()).filter(|&i| h[i].0 == 1.0).collect();
    if full.is_empty() {
        return h.len() - 1;
    }
    let best = full.iter().map(|&i| h[i].1).fold(f64::NEG_INFINITY, f64::max);
    *full.iter().find(|&&i| h[i].1 == best).unwrap()
}

fn p4() -> Line {
    // Coarse grids make ties and 100% epochs common.
    let acc = prop_oneof![Just(1.0f64), (0u32..=20).prop_map(|k| k as f64 / 20.0)];
    let history = proptest::collection::vec((acc, (0u32..=10).prop_map(|k| k as f64 / 10.0)), 1..40);
    let r = run_prop(1000, history, |h| {
        let records: Vec<EpochRecord> = h
            .iter()
            .enumerate()
            .map(|(epoch, &(t, v))| EpochRecord {
                epoch,
                train_accuracy: t,
                validation_accuracy: Some(v),
                train_loss: 0.0,
                seconds: 0.0,
            })
            .collect();
        prop_assert_eq!(select_epoch(StopRule::BestValWithFullTrainAcc, &records), Some(oracle_epoch(&h)));
        Ok(())
    });
    match r {
        Ok(()) => judge("P4", vec![Check("1000 synthetic histories select the rule's epoch".into(), true)]),
        Err(e) => judge("P4", vec![Check(e, false)]),
    }
}

fn p5() -> Line {
    let cfg = find(Profile::Desk, "e1-mnist-svgg").unwrap().with_overrides(Some(7), None);
    let hash = cfg.config_hash();
    let pick = |dir: &str| -> Option<ExperimentResult> {
        let store = ResultStore::open(results_root().join(dir)).ok()?;
        store
            .load_all()
            .ok()?
            .into_iter()
            .rev()
            .find(|r| r.config_hash == hash && r.is_complete())
    };
    match (pick("determinism-a"), pick("determinism-b")) {
        (Some(a), Some(b)) => {
            let same = a.aggregates == b.aggregates;
            let diff: Vec<&String> = a
                .aggregates
                .iter()
                .filter(|(k, v)| b.aggregates.get(*k) != Some(v))
                .map(|(k, _)| k)
                .collect();
            judge(
                "P5",
                vec![Check(
                    format!("two E1 desk runs, seeds 7 and 8: {} aggregates, differing {diff:?}", a.aggregates.len()),
                    same,
                )],
            )
        }
        _ => skipped(
            "P5",
            format!(
                "needs two E1 desk results with --seed 7 in {}/determinism-a and -b",
                results_root().display()
            ),
        ),
    }
}

fn p6() -> Line {
    let root = data_root();
    let ds = match load_dataset(DatasetId::Mnist, Split::Train, &root, &LoadOptions::default()) {
        Ok(l) => l.dataset,
        Err(e) => return skipped("P6", format!("MNIST not found under {}: {e}", root.display())),
    };
    let mut checks = Vec::new();
    for c in 0..10u32 {
        let (train, probe) = exclusion_split(&ds, c).unwrap();
        let negatives = &train.labels()[ds.len()..];
        let expected = ds.labels().iter().filter(|&&l| l != c).count();
        let ok = train.labels()[..ds.len()] == *ds.labels()
            && negatives.len() == expected
            && negatives.iter().all(|&l| l != c)
            && probe.labels().iter().all(|&l| l == c)
            && probe.len() == ds.len() - expected;
        checks.push(Check(format!("class {c}"), ok));
    }
    if checks.iter().all(|c| c.1) {
        judge("P6", vec![Check("negatives and probe are label-disjoint for all 10 classes".into(), true)])
    } else {
        judge("P6", checks.into_iter().filter(|c| !c.1).collect())
    }
}

fn p7() -> Line {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/result.json");
    let mut checks = Vec::new();
    match load_result(&golden) {
        Ok(r) => {
            let text = std::fs::read_to_string(&golden).unwrap();
            let on_disk: serde_json::Value = serde_json::from_str(&text).unwrap();
            let again: serde_json::Value = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
            checks.push(Check("golden result fixture reserializes identically".into(), on_disk == again));
            checks.push(Check(
                "golden config hash matches its embedded config".into(),
                r.config.config_hash() == r.config_hash,
            ));
        }
        Err(e) => checks.push(Check(format!("golden fixture loads: {e}"), false)),
    }
    let mut bad = Vec::new();
    for profile in [Profile::Desk, Profile::Paper] {
        for c in shapebias::experiments::catalog(profile) {
            match ExperimentConfig::from_json(&c.to_json()) {
                Ok(back) if back == c && back.config_hash() == c.config_hash() => {}
                _ => bad.push(c.experiment_id.clone()),
            }
        }
    }
    checks.push(Check(format!("every catalog config round-trips (failures: {bad:?})"), bad.is_empty()));
    judge("P7", checks)
}

fn main() {
    let strict = flag("SHAPEBIAS_ACCEPTANCE_STRICT");
    let mut rs = Results::open(&results_root());
    println!(
        "acceptance: results from {}, data from {}",
        results_root().display(),
        data_root().display()
    );
    let props = [p1(), p2(), p3(), p4(), p5(), p6(), p7()];
    let quantitative = [
        c1(&mut rs),
        c2(&mut rs),
        c3(&mut rs),
        c4(&mut rs),
        c5(&mut rs),
        c6(&mut rs),
        c7(&mut rs),
        c8(&mut rs),
        c9(&mut rs),
        c10(&mut rs),
        c11(&mut rs),
    ];
    let mut fatal = false;
    for (line, is_prop) in props.iter().map(|l| (l, true)).chain(quantitative.iter().map(|l| (l, false))) {
        let tag = match line.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIPPED",
        };
        println!("criterion {:>3}: {tag:<7} {}", line.id, line.detail);
        if line.status == Status::Fail && (is_prop || strict) {
            fatal = true;
        }
    }
    let count = |s: Status| props.iter().chain(quantitative.iter()).filter(|l| l.status == s).count();
    println!(
        "acceptance: {} passed, {} failed, {} skipped",
        count(Status::Pass),
        count(Status::Fail),
        count(Status::Skipped)
    );
    if fatal {
        std::process::exit(1);
    }
}
