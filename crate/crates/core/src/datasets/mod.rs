//! Labeled image collections and the transforms the experiments are built from.
//!
//! Pixels are stored as 8-bit intensity levels `v` and exposed as the unit
//! interval value `v / 255`. All ingest paths normalize before anything else
//! touches the data, so every stored pixel is in `[0, 1]` by construction and
//! the negation `x -> 1 - x` is the exact level map `v -> 255 - v`.

mod loaders;

pub use loaders::{
    load_dataset, verify_data_root, DatasetId, FileDigest, LoadOptions, LoadReport,
    LoadedDataset, Split, VerifyReport, NOTMNIST_LETTERS, NOTMNIST_SUBSAMPLE_SEED,
};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of quantization steps between 0 and 1.
pub const LEVELS: f32 = 255.0;

/// A `count x height x width x channels` block of images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBatch {
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    levels: Vec<u8>,
}

impl ImageBatch {
    pub fn new(
        count: usize,
        height: usize,
        width: usize,
        channels: usize,
        levels: Vec<u8>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "height and width must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        let expected = count * height * width * channels;
        if levels.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} pixel values for {count}x{height}x{width}x{channels}, got {}",
                levels.len()
            )));
        }
        Ok(Self {
            count,
            height,
            width,
            channels,
            levels,
        })
    }

    /// Builds a batch from unit-interval floats, quantizing to the nearest level.
    ///
    /// Values outside `[0, 1]` (including NaN) are rejected: they indicate a
    /// source that skipped normalization.
    pub fn from_unit(
        count: usize,
        height: usize,
        width: usize,
        channels: usize,
        values: &[f32],
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(values.len());
        for (index, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::PixelOutOfRange { index, value });
            }
            levels.push((value * LEVELS).round() as u8);
        }
        Self::new(count, height, width, channels, levels)
    }

    pub fn empty(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(0, height, width, channels, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// `(height, width, channels)` of a single image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Raw levels of all images, row-major `n, y, x, c`.
    pub fn levels(&self) -> &[u8] {
        &self.levels
    }

    pub fn image_levels(&self, index: usize) -> &[u8] {
        let len = self.image_len();
        &self.levels[index * len..(index + 1) * len]
    }

    /// Unit-interval value of a flat pixel index.
    pub fn value(&self, flat_index: usize) -> f32 {
        f32::from(self.levels[flat_index]) / LEVELS
    }

    pub fn to_unit_vec(&self) -> Vec<f32> {
        self.levels.iter().map(|&v| f32::from(v) / LEVELS).collect()
    }

    /// Writes the selected images as unit floats into `out` (`indices.len() * image_len`).
    pub fn gather_unit(&self, indices: &[usize], out: &mut [f32]) {
        let len = self.image_len();
        debug_assert_eq!(out.len(), indices.len() * len);
        for (dst, &i) in out.chunks_exact_mut(len).zip(indices) {
            for (d, &v) in dst.iter_mut().zip(self.image_levels(i)) {
                *d = f32::from(v) / LEVELS;
            }
        }
    }

    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let len = self.image_len();
        let mut levels = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            levels.extend_from_slice(self.image_levels(i));
        }
        ImageBatch {
            count: indices.len(),
            levels,
            ..*self
        }
    }

    pub fn concat(parts: &[&ImageBatch]) -> Result<ImageBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot concatenate zero batches".into()))?;
        let shape = first.image_shape();
        let mut levels = Vec::with_capacity(parts.iter().map(|p| p.levels.len()).sum());
        let mut count = 0;
        for part in parts {
            if part.image_shape() != shape {
                return Err(Error::Shape(format!(
                    "cannot concatenate images of shape {:?} with {:?}",
                    part.image_shape(),
                    shape
                )));
            }
            levels.extend_from_slice(&part.levels);
            count += part.count;
        }
        ImageBatch::new(count, shape.0, shape.1, shape.2, levels)
    }
}

/// Pixel-wise complement `x -> 1 - x`, per channel.
pub fn negate(batch: &ImageBatch) -> ImageBatch {
    ImageBatch {
        levels: batch.levels.iter().map(|&v| u8::MAX - v).collect(),
        ..*batch
    }
}

/// Images with integer labels. Transforms return new datasets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    images: ImageBatch,
    labels: Vec<u32>,
    n_classes: u32,
    class_names: Vec<String>,
    source_tag: String,
}

impl LabeledDataset {
    pub fn new(
        images: ImageBatch,
        labels: Vec<u32>,
        n_classes: u32,
        class_names: Vec<String>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::InvalidArgument("n_classes must be positive".into()));
        }
        if labels.len() != images.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} images",
                labels.len(),
                images.len()
            )));
        }
        if class_names.len() != n_classes as usize {
            return Err(Error::InvalidArgument(format!(
                "{} class names for {n_classes} classes",
                class_names.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange { label, n_classes });
        }
        Ok(Self {
            images,
            labels,
            n_classes,
            class_names,
            source_tag: source_tag.into(),
        })
    }

    pub fn images(&self) -> &ImageBatch {
        &self.images
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_classes(&self) -> u32 {
        self.n_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-class image counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes as usize];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize], tag: impl Into<String>) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            class_names: self.class_names.clone(),
            source_tag: tag.into(),
        }
    }

    /// Images whose label is in `classes`, in original order.
    pub fn filter_classes(&self, classes: &BTreeSet<u32>) -> LabeledDataset {
        let indices: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        let tag = format!("{}[classes {}]", self.source_tag, class_list(classes));
        self.select(&indices, tag)
    }

    /// Same labels, complemented pixels.
    pub fn negated(&self) -> LabeledDataset {
        LabeledDataset {
            images: negate(&self.images),
            labels: self.labels.clone(),
            n_classes: self.n_classes,
            class_names: self.class_names.clone(),
            source_tag: format!("{}-negative", self.source_tag),
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> LabeledDataset {
        self.source_tag = tag.into();
        self
    }

    /// An image-free dataset with this dataset's label space and image shape.
    pub fn empty_like(&self, tag: impl Into<String>) -> LabeledDataset {
        self.select(&[], tag)
    }
}

fn class_list(classes: &BTreeSet<u32>) -> String {
    classes
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMapKind {
    Identity,
    /// `i -> (i + k) mod n`.
    Shift(u32),
    /// `i -> base + i`, into a label space of `base + n` classes.
    Offset(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelMap {
    pub kind: LabelMapKind,
    pub n_classes: u32,
}

impl LabelMap {
    pub fn identity(n_classes: u32) -> Self {
        Self {
            kind: LabelMapKind::Identity,
            n_classes,
        }
    }

    pub fn shift(k: u32, n_classes: u32) -> Self {
        Self {
            kind: LabelMapKind::Shift(k),
            n_classes,
        }
    }

    pub fn offset(base: u32, n_classes: u32) -> Self {
        Self {
            kind: LabelMapKind::Offset(base),
            n_classes,
        }
    }

    pub fn is_identity(&self) -> bool {
        match self.kind {
            LabelMapKind::Identity => true,
            LabelMapKind::Shift(k) => k % self.n_classes == 0,
            LabelMapKind::Offset(base) => base == 0,
        }
    }

    /// Size of the label space the map writes into.
    pub fn output_classes(&self) -> u32 {
        match self.kind {
            LabelMapKind::Identity | LabelMapKind::Shift(_) => self.n_classes,
            LabelMapKind::Offset(base) => base + self.n_classes,
        }
    }

    pub fn apply(&self, label: u32) -> Result<u32> {
        if label >= self.n_classes {
            return Err(Error::LabelOutOfRange {
                label,
                n_classes: self.n_classes,
            });
        }
        Ok(match self.kind {
            LabelMapKind::Identity => label,
            LabelMapKind::Shift(k) => ((u64::from(label) + u64::from(k)) % u64::from(self.n_classes)) as u32,
            LabelMapKind::Offset(base) => base + label,
        })
    }

    fn describe(&self) -> String {
        match self.kind {
            LabelMapKind::Identity => "identity".into(),
            LabelMapKind::Shift(k) => format!("shift({k})"),
            LabelMapKind::Offset(b) => format!("offset({b})"),
        }
    }
}

/// Relabels every image through `map`; pixels are untouched.
pub fn remap_labels(ds: &LabeledDataset, map: &LabelMap) -> Result<LabeledDataset> {
    if map.n_classes != ds.n_classes {
        return Err(Error::InvalidArgument(format!(
            "label map expects {} classes but dataset `{}` has {}",
            map.n_classes, ds.source_tag, ds.n_classes
        )));
    }
    let labels = ds
        .labels
        .iter()
        .map(|&l| map.apply(l))
        .collect::<Result<Vec<_>>>()?;
    let class_names = match map.kind {
        LabelMapKind::Offset(base) => (0..base)
            .map(|i| format!("class{i}"))
            .chain(ds.class_names.iter().cloned())
            .collect(),
        _ => ds.class_names.clone(),
    };
    LabeledDataset::new(
        ds.images.clone(),
        labels,
        map.output_classes(),
        class_names,
        format!("{}|{}", ds.source_tag, map.describe()),
    )
}

/// Disjoint, exhaustive split holding out `round(fraction * len)` images for validation.
pub fn holdout_split(
    ds: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = ds.len();
    let n_val = (n as f64 * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((
        ds.select(&train_idx, format!("{}/train", ds.source_tag)),
        ds.select(&val_idx, format!("{}/val", ds.source_tag)),
    ))
}

/// Class-exclusion protocol: all regular images plus negatives of every class
/// except `excluded`; the probe is the negatives of the excluded class.
pub fn exclusion_split(
    ds: &LabeledDataset,
    excluded: u32,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if excluded >= ds.n_classes {
        return Err(Error::LabelOutOfRange {
            label: excluded,
            n_classes: ds.n_classes,
        });
    }
    let kept: BTreeSet<u32> = (0..ds.n_classes).filter(|&c| c != excluded).collect();
    let negatives = ds.filter_classes(&kept).negated();
    let train = mix(&[ds.clone(), negatives], MixPolicy::MergedLabels)?
        .with_tag(format!("{}+negatives-except-{excluded}", ds.source_tag));
    let probe = ds
        .filter_classes(&BTreeSet::from([excluded]))
        .negated()
        .with_tag(format!("{}-negative[class {excluded}]", ds.source_tag));
    Ok((train, probe))
}

/// I.i.d. uniform pixels and uniform labels.
pub fn make_random_dataset(
    n: usize,
    shape: (usize, usize, usize),
    n_classes: u32,
    seed: u64,
) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("random dataset needs n > 0".into()));
    }
    if n_classes == 0 {
        return Err(Error::InvalidArgument("n_classes must be positive".into()));
    }
    let (h, w, c) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut levels = vec![0u8; n * h * w * c];
    rng.fill(levels.as_mut_slice());
    let labels = (0..n).map(|_| rng.gen_range(0..n_classes)).collect();
    LabeledDataset::new(
        ImageBatch::new(n, h, w, c, levels)?,
        labels,
        n_classes,
        (0..n_classes).map(|i| format!("random{i}")).collect(),
        format!("random-{n}-seed{seed}"),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixPolicy {
    /// Each part gets its own label block, in argument order.
    DistinctLabels,
    /// Labels are kept as-is; all parts must share a class count.
    MergedLabels,
}

/// Concatenates datasets under a label policy.
pub fn mix(parts: &[LabeledDataset], policy: MixPolicy) -> Result<LabeledDataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("mix needs at least one dataset".into()))?;
    let images = ImageBatch::concat(&parts.iter().map(|p| &p.images).collect::<Vec<_>>())?;
    let tag = parts
        .iter()
        .map(|p| p.source_tag.as_str())
        .collect::<Vec<_>>()
        .join("+");
    match policy {
        MixPolicy::DistinctLabels => {
            let mut labels = Vec::with_capacity(images.len());
            let mut names = Vec::new();
            let mut base = 0;
            for part in parts {
                labels.extend(part.labels.iter().map(|&l| base + l));
                names.extend(part.class_names.iter().cloned());
                base += part.n_classes;
            }
            LabeledDataset::new(images, labels, base, names, tag)
        }
        MixPolicy::MergedLabels => {
            if let Some(bad) = parts.iter().find(|p| p.n_classes != first.n_classes) {
                return Err(Error::InvalidArgument(format!(
                    "merged labels need equal class counts: `{}` has {}, `{}` has {}",
                    first.source_tag, first.n_classes, bad.source_tag, bad.n_classes
                )));
            }
            let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
            let names = (0..first.n_classes as usize)
                .map(|i| {
                    let mut seen: Vec<&str> = Vec::new();
                    for p in parts {
                        let name = p.class_names[i].as_str();
                        if !seen.contains(&name) {
                            seen.push(name);
                        }
                    }
                    seen.join("/")
                })
                .collect();
            LabeledDataset::new(images, labels, first.n_classes, names, tag)
        }
    }
}

/// Per-class allocation for drawing `count` images from classes with the
/// given sizes: as even as sizes allow, remainders to the lowest classes.
pub fn stratified_allocation(sizes: &[usize], count: usize) -> Option<Vec<usize>> {
    if sizes.iter().sum::<usize>() < count {
        return None;
    }
    let mut alloc = vec![0usize; sizes.len()];
    let mut remaining = count;
    let mut open: Vec<usize> = (0..sizes.len()).filter(|&i| sizes[i] > 0).collect();
    while remaining > 0 {
        let share = remaining / open.len();
        let extra = remaining % open.len();
        let mut next_open = Vec::new();
        let mut given = 0;
        for (rank, &i) in open.iter().enumerate() {
            let want = share + usize::from(rank < extra);
            let room = sizes[i] - alloc[i];
            let take = want.min(room);
            alloc[i] += take;
            given += take;
            if sizes[i] > alloc[i] {
                next_open.push(i);
            }
        }
        remaining -= given;
        open = next_open;
    }
    Some(alloc)
}

/// Draws exactly `count` images from `classes` without replacement, stratified.
pub fn subset(
    ds: &LabeledDataset,
    classes: &BTreeSet<u32>,
    count: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if let Some(&label) = classes.iter().find(|&&c| c >= ds.n_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: ds.n_classes,
        });
    }
    let class_vec: Vec<u32> = classes.iter().copied().collect();
    let members: Vec<Vec<usize>> = class_vec
        .iter()
        .map(|&c| (0..ds.len()).filter(|&i| ds.labels[i] == c).collect())
        .collect();
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let alloc = stratified_allocation(&sizes, count).ok_or_else(|| Error::InsufficientImages {
        requested: count,
        available: sizes.iter().sum(),
        classes: class_vec.clone(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(count);
    for (mut idx, take) in members.into_iter().zip(alloc) {
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..take]);
    }
    chosen.sort_unstable();
    Ok(ds.select(
        &chosen,
        format!(
            "{}[subset {count} of classes {} seed {seed}]",
            ds.source_tag,
            class_list(classes)
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n_per_class: usize, n_classes: u32) -> LabeledDataset {
        let n = n_per_class * n_classes as usize;
        let levels = (0..n * 4).map(|i| (i % 256) as u8).collect();
        let labels = (0..n).map(|i| (i % n_classes as usize) as u32).collect();
        LabeledDataset::new(
            ImageBatch::new(n, 2, 2, 1, levels).unwrap(),
            labels,
            n_classes,
            (0..n_classes).map(|i| i.to_string()).collect(),
            "toy",
        )
        .unwrap()
    }

    #[test]
    fn negate_complements_each_pixel() {
        let b = ImageBatch::from_unit(1, 1, 2, 1, &[0.25, 0.0]).unwrap();
        let n = negate(&b);
        assert!((n.value(0) - 0.75).abs() < 1.0 / 255.0);
        assert_eq!(n.value(1), 1.0);
        let zeros = ImageBatch::new(1, 2, 2, 3, vec![0; 12]).unwrap();
        assert!(negate(&zeros).to_unit_vec().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn negate_exact_on_representable_levels() {
        // 0.25 is not a multiple of 1/255; 64/255 maps to exactly 191/255.
        let b = ImageBatch::new(1, 1, 1, 1, vec![64]).unwrap();
        assert_eq!(negate(&b).levels(), &[191]);
        assert_eq!(negate(&negate(&b)), b);
    }

    #[test]
    fn unnormalized_input_rejected() {
        let err = ImageBatch::from_unit(1, 1, 2, 1, &[0.5, 255.0]).unwrap_err();
        assert!(matches!(err, Error::PixelOutOfRange { index: 1, .. }));
        assert!(ImageBatch::from_unit(1, 1, 1, 1, &[f32::NAN]).is_err());
        assert!(ImageBatch::from_unit(1, 1, 1, 1, &[-0.01]).is_err());
    }

    #[test]
    fn bad_shapes_rejected() {
        assert!(ImageBatch::new(1, 2, 2, 2, vec![0; 8]).is_err());
        assert!(ImageBatch::new(1, 0, 2, 1, vec![]).is_err());
        assert!(ImageBatch::new(2, 2, 2, 1, vec![0; 4]).is_err());
    }

    #[test]
    fn dataset_rejects_out_of_range_labels() {
        let images = ImageBatch::new(2, 1, 1, 1, vec![0, 1]).unwrap();
        let err =
            LabeledDataset::new(images, vec![0, 3], 3, vec!["a".into(); 3], "t").unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, .. }));
    }

    #[test]
    fn shift_wraps_and_cycles() {
        let m = LabelMap::shift(1, 10);
        assert_eq!(m.apply(9).unwrap(), 0);
        assert_eq!(m.apply(0).unwrap(), 1);
        for l in 0..10 {
            let mut x = l;
            for _ in 0..10 {
                x = m.apply(x).unwrap();
            }
            assert_eq!(x, l);
        }
        assert!(m.apply(10).is_err());
    }

    #[test]
    fn remap_requires_matching_class_count() {
        let ds = toy(2, 10);
        assert!(remap_labels(&ds, &LabelMap::shift(1, 9)).is_err());
        let out = remap_labels(&ds, &LabelMap::shift(1, 10)).unwrap();
        assert_eq!(out.images(), ds.images());
        assert_eq!(out.labels()[9], 0);
        assert!(out.source_tag().ends_with("shift(1)"));
    }

    #[test]
    fn offset_map_widens_label_space() {
        let ds = toy(1, 10);
        let out = remap_labels(&ds, &LabelMap::offset(10, 10)).unwrap();
        assert_eq!(out.n_classes(), 20);
        assert_eq!(out.labels()[3], 13);
    }

    #[test]
    fn holdout_fraction_and_partition() {
        let ds = toy(10, 10);
        let (train, val) = holdout_split(&ds, 0.2, 3).unwrap();
        assert_eq!((train.len(), val.len()), (80, 20));
        assert!(holdout_split(&ds, 0.0, 3).is_err());
        assert!(holdout_split(&ds, 1.0, 3).is_err());
    }

    #[test]
    fn exclusion_split_contents() {
        let ds = toy(5, 10);
        let (train, probe) = exclusion_split(&ds, 9).unwrap();
        assert_eq!(train.len(), 50 + 45);
        assert_eq!(probe.len(), 5);
        assert!(probe.labels().iter().all(|&l| l == 9));
        // the negative part of train follows the regular part
        assert!(train.labels()[50..].iter().all(|&l| l != 9));
        assert!(exclusion_split(&ds, 10).is_err());
    }

    #[test]
    fn random_dataset_labels_and_determinism() {
        let a = make_random_dataset(500, (4, 4, 1), 10, 1).unwrap();
        let b = make_random_dataset(500, (4, 4, 1), 10, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.labels().iter().all(|&l| l < 10));
        assert!(make_random_dataset(0, (4, 4, 1), 10, 1).is_err());
    }

    #[test]
    fn mix_policies() {
        let a = toy(2, 10);
        let b = toy(3, 10);
        let d = mix(&[a.clone(), b.clone()], MixPolicy::DistinctLabels).unwrap();
        assert_eq!(d.n_classes(), 20);
        assert_eq!(d.len(), 50);
        assert!(d.labels()[20..].iter().all(|&l| l >= 10));
        let m = mix(&[a.clone(), a.clone()], MixPolicy::MergedLabels).unwrap();
        assert_eq!((m.len(), m.n_classes()), (40, 10));
        let small = toy(2, 4);
        assert!(mix(&[a, small], MixPolicy::MergedLabels).is_err());
    }

    #[test]
    fn subset_counts() {
        let ds = toy(30, 10);
        let s = subset(&ds, &BTreeSet::from([0, 1, 2, 3]), 100, 5).unwrap();
        assert_eq!(s.class_counts()[..4], [25, 25, 25, 25]);
        let s = subset(&ds, &BTreeSet::from([0, 1, 2]), 10, 5).unwrap();
        assert_eq!(s.class_counts()[..3], [4, 3, 3]);
        let empty = subset(&ds, &BTreeSet::from([0]), 0, 5).unwrap();
        assert!(empty.is_empty());
        let err = subset(&ds, &BTreeSet::from([0]), 31, 5).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientImages {
                requested: 31,
                available: 30,
                ..
            }
        ));
    }

    #[test]
    fn allocation_redistributes_small_classes() {
        assert_eq!(stratified_allocation(&[2, 10, 10], 12), Some(vec![2, 5, 5]));
        assert_eq!(stratified_allocation(&[2, 10, 10], 13), Some(vec![2, 6, 5]));
        assert_eq!(stratified_allocation(&[1, 1], 3), None);
        assert_eq!(stratified_allocation(&[0, 4], 4), Some(vec![0, 4]));
    }
}
