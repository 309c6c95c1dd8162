//! Top-1 accuracy, confusion statistics and output KL divergence.

use serde::{Deserialize, Serialize};

use crate::datasets::{negate, ImageBatch, LabelMap, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{Model, ProbabilityBatch};

/// Probability clamp applied before taking logs.
pub const KL_EPSILON: f64 = 1e-12;

/// Anything that maps images to class probabilities.
pub trait Predictor {
    fn n_classes(&self) -> u32;
    fn predict(&self, batch: &ImageBatch) -> Result<ProbabilityBatch>;
}

impl Predictor for Model {
    fn n_classes(&self) -> u32 {
        self.spec().n_classes
    }

    fn predict(&self, batch: &ImageBatch) -> Result<ProbabilityBatch> {
        Model::predict(self, batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub per_image_kl: Vec<f64>,
    pub mean_kl: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes with no samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    /// Fraction of all samples predicted as `(label + 1) mod n`.
    pub fn shifted_mass(&self, shift: usize) -> f64 {
        let n = self.confusion.len();
        let total: u64 = self.confusion.iter().flatten().sum();
        let hit: u64 = (0..n).map(|i| self.confusion[i][(i + shift) % n]).sum();
        hit as f64 / total as f64
    }
}

fn check_covers(p: &dyn Predictor, ds: &LabeledDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "cannot evaluate on empty dataset `{}`",
            ds.source_tag()
        )));
    }
    if ds.n_classes() > p.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "model has {} classes but dataset `{}` uses {}",
            p.n_classes(),
            ds.source_tag(),
            ds.n_classes()
        )));
    }
    Ok(())
}

/// Fraction of rows whose argmax equals the target.
pub fn accuracy_of(predicted: &[u32], targets: &[u32]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::InvalidArgument("accuracy of zero samples".into()));
    }
    if predicted.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predicted.len(),
            targets.len()
        )));
    }
    let hits = predicted.iter().zip(targets).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / predicted.len() as f64)
}

pub fn accuracy(model: &dyn Predictor, ds: &LabeledDataset) -> Result<f64> {
    check_covers(model, ds)?;
    let predicted = model.predict(ds.images())?.argmax();
    accuracy_of(&predicted, ds.labels())
}

/// Accuracy against `map(label)` instead of the stored label.
pub fn modified_label_accuracy(model: &dyn Predictor, ds: &LabeledDataset, map: &LabelMap) -> Result<f64> {
    check_covers(model, ds)?;
    let targets = ds
        .labels()
        .iter()
        .map(|&l| map.apply(l))
        .collect::<Result<Vec<_>>>()?;
    let predicted = model.predict(ds.images())?.argmax();
    accuracy_of(&predicted, &targets)
}

/// `sum_i p_i ln(p_i / q_i)`. Both sides are clamped to `[KL_EPSILON, 1]` and
/// renormalized in f64, so f32 rows that miss a unit sum still give a value >= 0.
pub fn kl_divergence(p: &[f32], q: &[f32]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions have {} and {} entries",
            p.len(),
            q.len()
        )));
    }
    let normalized = |v: &[f32]| {
        let c: Vec<f64> = v.iter().map(|&x| f64::from(x).clamp(KL_EPSILON, 1.0)).collect();
        let s: f64 = c.iter().sum();
        c.into_iter().map(move |x| x / s)
    };
    // Each term of p ln(p/q) - p + q is >= 0; on unit sums the extra terms cancel.
    Ok(normalized(p)
        .zip(normalized(q))
        .map(|(a, b)| (a * (a / b).ln() - a + b).max(0.0))
        .sum())
}

/// Per-image `KL(P(x) || P(1 - x))` and its mean.
pub fn mean_pairwise_kl(model: &dyn Predictor, regular: &LabeledDataset) -> Result<KlReport> {
    if regular.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "cannot compute KL on empty dataset `{}`",
            regular.source_tag()
        )));
    }
    let p = model.predict(regular.images())?;
    let q = model.predict(&negate(regular.images()))?;
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

pub fn confusion_of(predicted: &[u32], targets: &[u32], n_classes: usize) -> Result<EvalReport> {
    let accuracy = accuracy_of(predicted, targets)?;
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &t) in predicted.iter().zip(targets) {
        confusion[t as usize][p as usize] += 1;
    }
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row[i] as f64 / total as f64)
        })
        .collect();
    Ok(EvalReport {
        accuracy,
        per_class_accuracy,
        confusion,
    })
}

pub fn confusion(model: &dyn Predictor, ds: &LabeledDataset) -> Result<EvalReport> {
    check_covers(model, ds)?;
    let predicted = model.predict(ds.images())?.argmax();
    confusion_of(&predicted, ds.labels(), model.n_classes() as usize)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::datasets::make_random_dataset;
    use proptest::prelude::*;

    /// Predicts from the first pixel level: class `level % n`, with probability `confidence`.
    pub(crate) struct LevelOracle {
        pub n: u32,
        pub confidence: f32,
    }

    impl Predictor for LevelOracle {
        fn n_classes(&self) -> u32 {
            self.n
        }

        fn predict(&self, batch: &ImageBatch) -> Result<ProbabilityBatch> {
            let n = self.n as usize;
            let rest = (1.0 - self.confidence) / (n - 1) as f32;
            let mut probs = Vec::new();
            for i in 0..batch.len() {
                let class = batch.image_levels(i)[0] as usize % n;
                probs.extend((0..n).map(|c| if c == class { self.confidence } else { rest }));
            }
            Ok(ProbabilityBatch { n_classes: n, probs })
        }
    }

    struct Constant(u32);

    impl Predictor for Constant {
        fn n_classes(&self) -> u32 {
            self.0
        }

        fn predict(&self, batch: &ImageBatch) -> Result<ProbabilityBatch> {
            let n = self.0 as usize;
            Ok(ProbabilityBatch {
                n_classes: n,
                probs: vec![1.0 / n as f32; n * batch.len()],
            })
        }
    }

    fn labeled_by_first_pixel(n: usize) -> LabeledDataset {
        let ds = make_random_dataset(n, (2, 2, 1), 4, 5).unwrap();
        let labels = (0..n).map(|i| u32::from(ds.images().image_levels(i)[0]) % 4).collect();
        LabeledDataset::new(ds.images().clone(), labels, 4, ds.class_names().to_vec(), "t").unwrap()
    }

    #[test]
    fn perfect_model() {
        let ds = labeled_by_first_pixel(50);
        let m = LevelOracle { n: 4, confidence: 0.7 };
        assert_eq!(accuracy(&m, &ds).unwrap(), 1.0);
        let r = confusion(&m, &ds).unwrap();
        for (i, row) in r.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i != j {
                    assert_eq!(v, 0);
                }
            }
        }
        let counts = ds.class_counts();
        for (row, &c) in r.confusion.iter().zip(&counts) {
            assert_eq!(row.iter().sum::<u64>() as usize, c);
        }
        let shifted = LabelMap::shift(1, 4);
        assert_eq!(modified_label_accuracy(&m, &ds, &shifted).unwrap(), 0.0);
        assert_eq!(
            modified_label_accuracy(&m, &ds, &LabelMap::identity(4)).unwrap(),
            1.0
        );
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let ds = labeled_by_first_pixel(3).empty_like("none");
        assert!(accuracy(&Constant(4), &ds).is_err());
        assert!(mean_pairwise_kl(&Constant(4), &ds).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let ds = labeled_by_first_pixel(10);
        let r = confusion(&Constant(4), &ds).unwrap();
        assert!(r.confusion.iter().all(|row| row[1..].iter().all(|&v| v == 0)));
    }

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-9);
        let v = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let want = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((v - want).abs() < 1e-7);
        assert!((v - 0.1438).abs() < 1e-4);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn constant_model_has_zero_kl() {
        let ds = labeled_by_first_pixel(20);
        let r = mean_pairwise_kl(&Constant(4), &ds).unwrap();
        assert_eq!(r.mean_kl, 0.0);
        assert_eq!(r.per_image_kl.len(), 20);
        assert_eq!(r.epsilon, KL_EPSILON);
    }

    #[test]
    fn shifted_mass_counts_next_class() {
        let r = confusion_of(&[1, 2, 0, 0], &[0, 1, 2, 0], 3).unwrap();
        assert!((r.shifted_mass(1) - 0.75).abs() < 1e-12);
        assert_eq!(r.per_class_accuracy, vec![Some(0.5), Some(0.0), Some(0.0)]);
    }

    fn distribution(n: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(0.0f32..1.0, n).prop_map(|v| {
            let s: f32 = v.iter().sum::<f32>() + 1e-6;
            v.iter().map(|x| (x + 1e-6 / v.len() as f32) / s).collect()
        })
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_on_self(p in distribution(6), q in distribution(6)) {
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-6);
        }

        #[test]
        fn accuracy_is_a_ratio(pairs in prop::collection::vec((0u32..5, 0u32..5), 1..60)) {
            let (p, t): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
            let a = accuracy_of(&p, &t).unwrap();
            let errors = p.iter().zip(&t).filter(|(a, b)| a != b).count() as f64 / p.len() as f64;
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a + errors - 1.0).abs() < 1e-12);
            let r = confusion_of(&p, &t, 5).unwrap();
            let trace: u64 = (0..5).map(|i| r.confusion[i][i]).sum();
            prop_assert!((r.accuracy - trace as f64 / p.len() as f64).abs() < 1e-12);
        }

        #[test]
        fn mean_kl_ignores_order(seed in 0u64..1000) {
            let ds = labeled_by_first_pixel(12);
            let m = LevelOracle { n: 4, confidence: 0.9 };
            let mut idx: Vec<usize> = (0..12).collect();
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = mean_pairwise_kl(&m, &ds).unwrap().mean_kl;
            let b = mean_pairwise_kl(&m, &ds.select(&idx, "shuffled")).unwrap().mean_kl;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn identity_map_matches_accuracy(n in 1usize..40, seed in 0u64..100) {
            let ds = make_random_dataset(n, (2, 2, 1), 4, seed).unwrap();
            let m = LevelOracle { n: 4, confidence: 0.5 };
            prop_assert_eq!(
                modified_label_accuracy(&m, &ds, &LabelMap::identity(4)).unwrap(),
                accuracy(&m, &ds).unwrap()
            );
        }
    }
}
