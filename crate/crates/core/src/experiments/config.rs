//! Declarative experiment configs and the data expressions they are built from.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{
    exclusion_split, load_dataset, make_random_dataset, mix, remap_labels, subset, DatasetId, LabelMap,
    LabelMapKind, LabeledDataset, LoadOptions, LoadReport, MixPolicy, Split,
};
use crate::error::{Error, Result};
use crate::models::{Family, ModelSpec};
use crate::training::{StopRule, TrainingRecipe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 500-epoch cap, 5 repetitions, full datasets.
    Paper,
    /// 30-epoch cap, 2 repetitions, CIFAR10 train subsampled.
    Desk,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::InvalidArgument(format!(
                "unknown profile `{other}` (expected paper or desk)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Group {
    E1,
    E2,
    E3,
    Excl,
    BnAblation,
    Diversity,
    #[serde(rename = "TWO_DATASET_20")]
    TwoDataset20,
    #[serde(rename = "TWO_DATASET_10")]
    TwoDataset10,
    CountSweep,
    RandomAug,
    RandomNeg,
    InitFinetune,
    RegAblation,
    Custom,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).map_err(|_| fmt::Error)?;
        f.write_str(s.as_str().unwrap_or_default())
    }
}

/// A set of class labels, resolved against a dataset's label space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSet {
    All,
    Only(Vec<u32>),
    AllExcept(Vec<u32>),
}

impl ClassSet {
    pub fn resolve(&self, n_classes: u32) -> Result<BTreeSet<u32>> {
        let listed = match self {
            ClassSet::All => return Ok((0..n_classes).collect()),
            ClassSet::Only(c) | ClassSet::AllExcept(c) => c,
        };
        if let Some(&label) = listed.iter().find(|&&c| c >= n_classes) {
            return Err(Error::LabelOutOfRange { label, n_classes });
        }
        let listed: BTreeSet<u32> = listed.iter().copied().collect();
        Ok(match self {
            ClassSet::AllExcept(_) => (0..n_classes).filter(|c| !listed.contains(c)).collect(),
            _ => listed,
        })
    }
}

/// Parameters `run_sweep` can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Sets `count` on tagged subsets.
    NegativeCount,
    /// Sets the class list of tagged subsets, and the complement on tagged class filters.
    DiversityClasses,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::NegativeCount => "negative_count",
            SweepParam::DiversityClasses => "diversity_classes",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negative_count" => Ok(SweepParam::NegativeCount),
            "diversity_classes" => Ok(SweepParam::DiversityClasses),
            other => Err(Error::InvalidArgument(format!(
                "`{other}` is not sweepable (expected negative_count or diversity_classes)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Count(usize),
    Classes(Vec<u32>),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Count(n) => write!(f, "{n}"),
            SweepValue::Classes(c) => {
                let s: Vec<String> = c.iter().map(u32::to_string).collect();
                write!(f, "[{}]", s.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionPart {
    /// All regular images plus negatives of every other class.
    Train,
    /// Negatives of the excluded class.
    Probe,
}

/// How a dataset is assembled from sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataExpr {
    Source {
        dataset: DatasetId,
        split: Split,
    },
    Negate {
        of: Box<DataExpr>,
    },
    /// Relabels through a map over the inner label space.
    Remap {
        of: Box<DataExpr>,
        map: LabelMapKind,
    },
    Classes {
        of: Box<DataExpr>,
        classes: ClassSet,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sweep: Option<SweepParam>,
    },
    /// Stratified draw without replacement.
    Subset {
        of: Box<DataExpr>,
        classes: ClassSet,
        count: usize,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sweep: Option<SweepParam>,
    },
    Random {
        n: usize,
        shape: (usize, usize, usize),
        n_classes: u32,
        seed: u64,
    },
    Mix {
        parts: Vec<DataExpr>,
        policy: MixPolicy,
    },
    Exclusion {
        of: Box<DataExpr>,
        excluded: u32,
        part: ExclusionPart,
    },
    /// No images; produced by normalization and dropped from mixes.
    Empty,
}

/// Image shape and label-space size of a non-empty expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Signature {
    pub shape: (usize, usize, usize),
    pub n_classes: u32,
}

impl DataExpr {
    pub fn source(dataset: DatasetId, split: Split) -> Self {
        DataExpr::Source { dataset, split }
    }

    pub fn negate(self) -> Self {
        DataExpr::Negate { of: Box::new(self) }
    }

    pub fn remap(self, map: LabelMapKind) -> Self {
        DataExpr::Remap {
            of: Box::new(self),
            map,
        }
    }

    pub fn classes(self, classes: ClassSet) -> Self {
        DataExpr::Classes {
            of: Box::new(self),
            classes,
            sweep: None,
        }
    }

    pub fn subset(self, classes: ClassSet, count: usize, seed: u64) -> Self {
        DataExpr::Subset {
            of: Box::new(self),
            classes,
            count,
            seed,
            sweep: None,
        }
    }

    pub fn mix(parts: Vec<DataExpr>, policy: MixPolicy) -> Self {
        DataExpr::Mix { parts, policy }
    }

    pub fn exclusion(self, excluded: u32, part: ExclusionPart) -> Self {
        DataExpr::Exclusion {
            of: Box::new(self),
            excluded,
            part,
        }
    }

    /// Tags a `Classes` or `Subset` node as the target of a sweep parameter.
    pub fn swept(mut self, param: SweepParam) -> Self {
        match &mut self {
            DataExpr::Classes { sweep, .. } | DataExpr::Subset { sweep, .. } => *sweep = Some(param),
            _ => {}
        }
        self
    }

    /// `None` for expressions that normalize to no images.
    pub fn signature(&self) -> Result<Option<Signature>> {
        Ok(match self {
            DataExpr::Source { dataset, split } => {
                if !dataset.splits().contains(split) {
                    return Err(Error::InvalidArgument(format!(
                        "{dataset} has no {} split",
                        split.name()
                    )));
                }
                Some(Signature {
                    shape: dataset.image_shape(),
                    n_classes: 10,
                })
            }
            DataExpr::Negate { of } => of.signature()?,
            DataExpr::Remap { of, map } => of.signature()?.map(|s| Signature {
                n_classes: LabelMap {
                    kind: *map,
                    n_classes: s.n_classes,
                }
                .output_classes(),
                ..s
            }),
            DataExpr::Classes { of, classes, .. } => match of.signature()? {
                Some(s) => {
                    classes.resolve(s.n_classes)?;
                    Some(s)
                }
                None => None,
            },
            DataExpr::Subset {
                of, classes, count, ..
            } => match of.signature()? {
                Some(s) => {
                    classes.resolve(s.n_classes)?;
                    (*count > 0).then_some(s)
                }
                None => None,
            },
            DataExpr::Random {
                n, shape, n_classes, ..
            } => {
                if *n_classes == 0 || shape.0 * shape.1 * shape.2 == 0 {
                    return Err(Error::InvalidArgument(
                        "random data needs a nonempty shape and at least one class".into(),
                    ));
                }
                (*n > 0).then_some(Signature {
                    shape: *shape,
                    n_classes: *n_classes,
                })
            }
            DataExpr::Mix { parts, policy } => {
                let sigs: Vec<Signature> = parts
                    .iter()
                    .map(DataExpr::signature)
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .flatten()
                    .collect();
                let Some(first) = sigs.first().copied() else {
                    return Ok(None);
                };
                if let Some(bad) = sigs.iter().find(|s| s.shape != first.shape) {
                    return Err(Error::Shape(format!(
                        "mixed parts have image shapes {:?} and {:?}",
                        first.shape, bad.shape
                    )));
                }
                let n_classes = match policy {
                    MixPolicy::DistinctLabels => sigs.iter().map(|s| s.n_classes).sum(),
                    MixPolicy::MergedLabels => {
                        if let Some(bad) = sigs.iter().find(|s| s.n_classes != first.n_classes) {
                            return Err(Error::InvalidArgument(format!(
                                "merged labels need equal class counts, got {} and {}",
                                first.n_classes, bad.n_classes
                            )));
                        }
                        first.n_classes
                    }
                };
                Some(Signature {
                    shape: first.shape,
                    n_classes,
                })
            }
            DataExpr::Exclusion { of, excluded, .. } => match of.signature()? {
                Some(s) if *excluded >= s.n_classes => {
                    return Err(Error::LabelOutOfRange {
                        label: *excluded,
                        n_classes: s.n_classes,
                    })
                }
                other => other,
            },
            DataExpr::Empty => None,
        })
    }

    /// Canonical form: empty draws vanish, mixes lose empty parts, one-part
    /// mixes collapse, identity maps and double negations disappear, and sweep
    /// tags are dropped.
    pub fn normalized(&self) -> DataExpr {
        match self {
            DataExpr::Source { .. } | DataExpr::Empty => self.clone(),
            DataExpr::Random { n, .. } => {
                if *n == 0 {
                    DataExpr::Empty
                } else {
                    self.clone()
                }
            }
            DataExpr::Negate { of } => match of.normalized() {
                DataExpr::Empty => DataExpr::Empty,
                DataExpr::Negate { of } => *of,
                inner => inner.negate(),
            },
            DataExpr::Remap { of, map } => match of.normalized() {
                DataExpr::Empty => DataExpr::Empty,
                inner if is_identity_kind(*map) => inner,
                inner => inner.remap(*map),
            },
            DataExpr::Classes { of, classes, .. } => match of.normalized() {
                DataExpr::Empty => DataExpr::Empty,
                inner if *classes == ClassSet::All || *classes == ClassSet::AllExcept(Vec::new()) => inner,
                inner => inner.classes(canonical_classes(classes)),
            },
            DataExpr::Subset {
                of,
                classes,
                count,
                seed,
                ..
            } => match of.normalized() {
                _ if *count == 0 => DataExpr::Empty,
                DataExpr::Empty => DataExpr::Empty,
                inner => inner.subset(canonical_classes(classes), *count, *seed),
            },
            DataExpr::Mix { parts, policy } => {
                let mut kept: Vec<DataExpr> = parts
                    .iter()
                    .map(DataExpr::normalized)
                    .filter(|p| *p != DataExpr::Empty)
                    .collect();
                match kept.len() {
                    0 => DataExpr::Empty,
                    1 => kept.pop().expect("one part"),
                    _ => DataExpr::mix(kept, *policy),
                }
            }
            DataExpr::Exclusion { of, excluded, part } => match of.normalized() {
                DataExpr::Empty => DataExpr::Empty,
                inner => inner.exclusion(*excluded, *part),
            },
        }
    }

    /// Sources the expression reads.
    pub fn sources(&self, out: &mut BTreeSet<(DatasetId, Split)>) {
        match self {
            DataExpr::Source { dataset, split } => {
                out.insert((*dataset, *split));
            }
            DataExpr::Negate { of }
            | DataExpr::Remap { of, .. }
            | DataExpr::Classes { of, .. }
            | DataExpr::Subset { of, .. }
            | DataExpr::Exclusion { of, .. } => of.sources(out),
            DataExpr::Mix { parts, .. } => parts.iter().for_each(|p| p.sources(out)),
            DataExpr::Random { .. } | DataExpr::Empty => {}
        }
    }

    /// Applies a sweep value to every node tagged with `param`; returns how many were touched.
    pub fn apply_sweep(&mut self, param: SweepParam, value: &SweepValue) -> Result<usize> {
        let mut touched = 0;
        match self {
            DataExpr::Subset {
                of,
                classes,
                count,
                sweep,
                ..
            } => {
                touched += of.apply_sweep(param, value)?;
                if *sweep == Some(param) {
                    match (param, value) {
                        (SweepParam::NegativeCount, SweepValue::Count(n)) => *count = *n,
                        (SweepParam::DiversityClasses, SweepValue::Classes(c)) => *classes = ClassSet::Only(c.clone()),
                        _ => return Err(sweep_type_error(param, value)),
                    }
                    touched += 1;
                }
            }
            DataExpr::Classes { of, classes, sweep } => {
                touched += of.apply_sweep(param, value)?;
                if *sweep == Some(param) {
                    match (param, value) {
                        (SweepParam::DiversityClasses, SweepValue::Classes(c)) => {
                            *classes = ClassSet::AllExcept(c.clone())
                        }
                        _ => return Err(sweep_type_error(param, value)),
                    }
                    touched += 1;
                }
            }
            DataExpr::Negate { of } | DataExpr::Remap { of, .. } | DataExpr::Exclusion { of, .. } => {
                touched += of.apply_sweep(param, value)?
            }
            DataExpr::Mix { parts, .. } => {
                for p in parts {
                    touched += p.apply_sweep(param, value)?;
                }
            }
            DataExpr::Source { .. } | DataExpr::Random { .. } | DataExpr::Empty => {}
        }
        Ok(touched)
    }
}

fn sweep_type_error(param: SweepParam, value: &SweepValue) -> Error {
    Error::InvalidArgument(format!("value {value} does not fit sweep parameter {}", param.name()))
}

fn is_identity_kind(kind: LabelMapKind) -> bool {
    matches!(kind, LabelMapKind::Identity | LabelMapKind::Offset(0))
}

fn canonical_classes(c: &ClassSet) -> ClassSet {
    let sorted = |v: &Vec<u32>| v.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    match c {
        ClassSet::All => ClassSet::All,
        ClassSet::Only(v) => ClassSet::Only(sorted(v)),
        ClassSet::AllExcept(v) => ClassSet::AllExcept(sorted(v)),
    }
}

/// Loads each source once and builds datasets from expressions.
#[derive(Debug)]
pub struct SourceCache {
    root: PathBuf,
    options: LoadOptions,
    loaded: BTreeMap<(DatasetId, Split), LabeledDataset>,
    reports: Vec<LoadReport>,
}

impl SourceCache {
    pub fn new(root: impl Into<PathBuf>, options: LoadOptions) -> Self {
        Self {
            root: root.into(),
            options,
            loaded: BTreeMap::new(),
            reports: Vec::new(),
        }
    }

    pub fn root(&self) -> &std::path::Path {
        &self.root
    }

    pub fn reports(&self) -> &[LoadReport] {
        &self.reports
    }

    /// Switches load options, dropping sources they affect.
    pub fn set_options(&mut self, options: LoadOptions) {
        if options != self.options {
            self.loaded.retain(|(d, _), _| *d != DatasetId::NotMnist);
            self.reports.retain(|r| r.dataset != DatasetId::NotMnist);
            self.options = options;
        }
    }

    pub fn get(&mut self, dataset: DatasetId, split: Split) -> Result<&LabeledDataset> {
        if !self.loaded.contains_key(&(dataset, split)) {
            let l = load_dataset(dataset, split, &self.root, &self.options)?;
            self.reports.push(l.report);
            self.loaded.insert((dataset, split), l.dataset);
        }
        Ok(&self.loaded[&(dataset, split)])
    }

    /// Builds the dataset; `None` for an empty expression.
    pub fn materialize(&mut self, expr: &DataExpr) -> Result<Option<LabeledDataset>> {
        Ok(match expr {
            DataExpr::Source { dataset, split } => Some(self.get(*dataset, *split)?.clone()),
            DataExpr::Negate { of } => self.materialize(of)?.map(|d| d.negated()),
            DataExpr::Remap { of, map } => match self.materialize(of)? {
                Some(d) => Some(remap_labels(
                    &d,
                    &LabelMap {
                        kind: *map,
                        n_classes: d.n_classes(),
                    },
                )?),
                None => None,
            },
            DataExpr::Classes { of, classes, .. } => match self.materialize(of)? {
                Some(d) => Some(d.filter_classes(&classes.resolve(d.n_classes())?)),
                None => None,
            },
            DataExpr::Subset {
                of,
                classes,
                count,
                seed,
                ..
            } => match self.materialize(of)? {
                Some(d) if *count > 0 => Some(subset(&d, &classes.resolve(d.n_classes())?, *count, *seed)?),
                _ => None,
            },
            DataExpr::Random {
                n,
                shape,
                n_classes,
                seed,
            } => {
                if *n == 0 {
                    None
                } else {
                    Some(make_random_dataset(*n, *shape, *n_classes, *seed)?)
                }
            }
            DataExpr::Mix { parts, policy } => {
                let mut built = Vec::new();
                for p in parts {
                    if let Some(d) = self.materialize(p)? {
                        built.push(d);
                    }
                }
                match built.len() {
                    0 => None,
                    1 => built.pop(),
                    _ => Some(mix(&built, *policy)?),
                }
            }
            DataExpr::Exclusion { of, excluded, part } => match self.materialize(of)? {
                Some(d) => {
                    let (train, probe) = exclusion_split(&d, *excluded)?;
                    Some(match part {
                        ExclusionPart::Train => train,
                        ExclusionPart::Probe => probe,
                    })
                }
                None => None,
            },
            DataExpr::Empty => None,
        })
    }
}

/// The architecture part of a model spec; input shape and class count come
/// from the training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub batch_norm: bool,
    #[serde(default)]
    pub l2_strength: f32,
    #[serde(default)]
    pub dropout_rate: f32,
}

impl ModelConfig {
    pub fn new(family: Family, batch_norm: bool) -> Self {
        Self {
            family,
            batch_norm,
            l2_strength: 0.0,
            dropout_rate: 0.0,
        }
    }
}

/// One training stage. Later phases continue from the previous phase's model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: String,
    pub train: DataExpr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_rule: Option<StopRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
}

impl Phase {
    pub fn new(name: impl Into<String>, train: DataExpr) -> Self {
        Self {
            name: name.into(),
            train,
            stop_rule: None,
            max_epochs: None,
        }
    }

    pub fn recipe(&self, base: &TrainingRecipe, seed: u64) -> TrainingRecipe {
        TrainingRecipe {
            stop_rule: self.stop_rule.unwrap_or(base.stop_rule),
            max_epochs: self.max_epochs.unwrap_or(base.max_epochs),
            seed,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSet {
    pub name: String,
    pub data: DataExpr,
    /// Score against `map(label)` instead of the stored label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scoring: Option<LabelMapKind>,
    /// Also report KL between outputs on each image and on its negative.
    #[serde(default)]
    pub kl: bool,
}

impl EvalSet {
    pub fn new(name: impl Into<String>, data: DataExpr) -> Self {
        Self {
            name: name.into(),
            data,
            scoring: None,
            kl: false,
        }
    }
}

/// Per-epoch evaluation on regular images, their negatives, and the KL between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tracking {
    pub data: DataExpr,
    pub stride: usize,
}

/// Feature-map grid for the `occurrence`-th image labeled `label` in `data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationProbe {
    pub data: DataExpr,
    pub label: u32,
    #[serde(default)]
    pub occurrence: usize,
    pub layer: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    pub values: Vec<SweepValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub parameter: SweepParam,
    pub value: SweepValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub description: String,
    pub group: Group,
    pub profile: Profile,
    pub model: ModelConfig,
    pub recipe: TrainingRecipe,
    pub holdout_fraction: f64,
    #[serde(default)]
    pub load_options: LoadOptions,
    pub phases: Vec<Phase>,
    pub evaluations: Vec<EvalSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracking: Option<Tracking>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_probe: Option<ActivationProbe>,
    /// Declares a sweepable parameter and its default grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    /// Set on configs produced by `at_sweep_point`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_point: Option<SweepPoint>,
}

/// The fields that determine what a run computes.
#[derive(Serialize)]
struct HashView<'a> {
    model: &'a ModelConfig,
    recipe: &'a TrainingRecipe,
    holdout_fraction: f64,
    load_options: &'a LoadOptions,
    phases: &'a [Phase],
    evaluations: &'a [EvalSet],
    tracking: &'a Option<Tracking>,
    activation_probe: &'a Option<ActivationProbe>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn exprs(&self) -> impl Iterator<Item = &DataExpr> {
        self.phases
            .iter()
            .map(|p| &p.train)
            .chain(self.evaluations.iter().map(|e| &e.data))
            .chain(self.tracking.iter().map(|t| &t.data))
            .chain(self.activation_probe.iter().map(|a| &a.data))
    }

    fn exprs_mut(&mut self) -> impl Iterator<Item = &mut DataExpr> {
        self.phases
            .iter_mut()
            .map(|p| &mut p.train)
            .chain(self.evaluations.iter_mut().map(|e| &mut e.data))
            .chain(self.tracking.iter_mut().map(|t| &mut t.data))
            .chain(self.activation_probe.iter_mut().map(|a| &mut a.data))
    }

    /// Every `(dataset, split)` the config reads.
    pub fn sources(&self) -> BTreeSet<(DatasetId, Split)> {
        let mut out = BTreeSet::new();
        for e in self.exprs() {
            e.normalized().sources(&mut out);
        }
        out
    }

    /// Same computation with every data expression in canonical form.
    pub fn normalized(&self) -> ExperimentConfig {
        let mut cfg = self.clone();
        for e in cfg.exprs_mut() {
            *e = e.normalized();
        }
        cfg
    }

    /// SHA-256 over the normalized computation; names, descriptions, groups
    /// and sweep labels do not contribute.
    pub fn config_hash(&self) -> String {
        let n = self.normalized();
        let view = HashView {
            model: &n.model,
            recipe: &n.recipe,
            holdout_fraction: n.holdout_fraction,
            load_options: &n.load_options,
            phases: &n.phases,
            evaluations: &n.evaluations,
            tracking: &n.tracking,
            activation_probe: &n.activation_probe,
        };
        let bytes = serde_json::to_vec(&view).expect("hash view serializes");
        format!("{:x}", Sha256::digest(bytes))
    }

    /// Model spec with the input shape and class count the phases imply.
    pub fn resolved_spec(&self) -> Result<ModelSpec> {
        let mut sig: Option<Signature> = None;
        for p in &self.phases {
            let s = p.train.signature()?.ok_or_else(|| {
                Error::InvalidArgument(format!("phase `{}` trains on an empty dataset", p.name))
            })?;
            sig = Some(match sig {
                None => s,
                Some(prev) if prev.shape != s.shape => {
                    return Err(Error::Shape(format!(
                        "phase `{}` uses {:?} images, earlier phases {:?}",
                        p.name, s.shape, prev.shape
                    )))
                }
                Some(prev) => Signature {
                    shape: prev.shape,
                    n_classes: prev.n_classes.max(s.n_classes),
                },
            });
        }
        let sig = sig.ok_or_else(|| Error::InvalidArgument("config has no phases".into()))?;
        let spec = ModelSpec {
            family: self.model.family,
            input_shape: sig.shape,
            n_classes: sig.n_classes,
            batch_norm: self.model.batch_norm,
            l2_strength: self.model.l2_strength,
            dropout_rate: self.model.dropout_rate,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.experiment_id.is_empty()
            || !self
                .experiment_id
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || "-_.".contains(c))
        {
            return bad(format!(
                "experiment_id `{}` must be nonempty lowercase ascii, digits, `-`, `_` or `.`",
                self.experiment_id
            ));
        }
        self.recipe.validate()?;
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!("holdout_fraction must be in (0, 1), got {}", self.holdout_fraction));
        }
        let spec = self.resolved_spec()?;
        let mut names = BTreeSet::new();
        for p in &self.phases {
            if !names.insert(p.name.as_str()) {
                return bad(format!("duplicate phase name `{}`", p.name));
            }
            p.recipe(&self.recipe, self.recipe.seed).validate()?;
        }
        if self.evaluations.is_empty() {
            return bad("config declares no evaluation sets".into());
        }
        let mut names = BTreeSet::new();
        for e in &self.evaluations {
            if e.name.is_empty() || !names.insert(e.name.as_str()) {
                return bad(format!("evaluation set names must be unique and nonempty: `{}`", e.name));
            }
            let sig = self.eval_signature(&e.data, &spec, &e.name)?;
            if let Some(kind) = e.scoring {
                let out = LabelMap {
                    kind,
                    n_classes: sig.n_classes,
                }
                .output_classes();
                if out > spec.n_classes {
                    return bad(format!(
                        "scoring for `{}` maps into {out} classes, model has {}",
                        e.name, spec.n_classes
                    ));
                }
            }
        }
        if let Some(t) = &self.tracking {
            if t.stride == 0 {
                return bad("tracking stride must be at least 1".into());
            }
            self.eval_signature(&t.data, &spec, "tracking")?;
        }
        if let Some(a) = &self.activation_probe {
            let sig = self.eval_signature(&a.data, &spec, "activation probe")?;
            if a.label >= sig.n_classes {
                return Err(Error::LabelOutOfRange {
                    label: a.label,
                    n_classes: sig.n_classes,
                });
            }
            if a.k == 0 {
                return bad("activation probe needs k >= 1".into());
            }
            let valid: Vec<String> = match spec.family {
                Family::Svgg => (1..=6).map(|i| format!("conv{i}")).collect(),
                _ => Vec::new(),
            };
            if !valid.contains(&a.layer) {
                return Err(Error::UnknownLayer {
                    requested: a.layer.clone(),
                    valid,
                });
            }
        }
        if let Some(s) = &self.sweep {
            let mut probe = self.clone();
            let first = s
                .values
                .first()
                .ok_or_else(|| Error::InvalidArgument("sweep declares no values".into()))?;
            if probe.exprs_mut().map(|e| e.apply_sweep(s.parameter, first)).sum::<Result<usize>>()? == 0 {
                return bad(format!("no data node is tagged for sweep `{}`", s.parameter.name()));
            }
        }
        Ok(())
    }

    fn eval_signature(&self, data: &DataExpr, spec: &ModelSpec, name: &str) -> Result<Signature> {
        let sig = data
            .signature()?
            .ok_or_else(|| Error::InvalidArgument(format!("`{name}` evaluates on an empty dataset")))?;
        if sig.shape != spec.input_shape {
            return Err(Error::Shape(format!(
                "`{name}` has {:?} images, model takes {:?}",
                sig.shape, spec.input_shape
            )));
        }
        if sig.n_classes > spec.n_classes {
            return Err(Error::InvalidArgument(format!(
                "`{name}` has {} classes, model has {}",
                sig.n_classes, spec.n_classes
            )));
        }
        Ok(sig)
    }

    /// The config with `value` applied to its declared sweep parameter.
    pub fn at_sweep_point(&self, value: &SweepValue) -> Result<ExperimentConfig> {
        let spec = self.sweep.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("experiment `{}` declares no sweep", self.experiment_id))
        })?;
        let param = spec.parameter;
        let mut cfg = self.clone();
        let mut touched = 0;
        for e in cfg.exprs_mut() {
            touched += e.apply_sweep(param, value)?;
        }
        if touched == 0 {
            return Err(Error::InvalidArgument(format!(
                "no data node is tagged for sweep `{}`",
                param.name()
            )));
        }
        cfg.sweep_point = Some(SweepPoint {
            parameter: param,
            value: value.clone(),
        });
        Ok(cfg)
    }

    pub fn with_overrides(mut self, seed: Option<u64>, repetitions: Option<usize>) -> Self {
        if let Some(s) = seed {
            self.recipe.seed = s;
        }
        if let Some(r) = repetitions {
            self.recipe.repetitions = r;
        }
        self
    }

    /// Seeds of the repetitions, in order.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.recipe.repetitions as u64).map(|i| self.recipe.seed + i).collect()
    }
}
