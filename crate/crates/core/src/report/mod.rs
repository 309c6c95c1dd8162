//! Result persistence and report rendering.
//!
//! Rendering only reads stored fields: every number in a table is the
//! `Display` form of a stored aggregate, so it can be grepped back to its file.

mod plot;
mod store;

pub use plot::{font_available, LinePlot, Series};
pub use store::{load_result, IndexEntry, ResultStore, INDEX_FILE};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{ExperimentResult, SweepValue};
use crate::training::Aggregate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    /// MNIST, three experiments, every model family.
    Fig2,
    /// CIFAR10, three experiments.
    Table1,
    /// Batch norm on/off, regular-only and class-exclusion training.
    Table2,
    /// Class exclusion, per excluded class.
    Fig3,
    /// Feature-map invariance on a probe digit.
    Fig4,
    /// Diversity of the negative subset.
    Fig5,
    /// Two-dataset training and the random-image controls.
    Fig6,
    /// MNIST negative accuracy against the number of notMNIST pairs.
    Fig7,
    /// Per-epoch traces of the initialization experiment.
    Fig8,
    /// Every stored result, one row each.
    Summary,
}

impl Artifact {
    pub const ALL: [Artifact; 10] = [
        Artifact::Fig2,
        Artifact::Table1,
        Artifact::Table2,
        Artifact::Fig3,
        Artifact::Fig4,
        Artifact::Fig5,
        Artifact::Fig6,
        Artifact::Fig7,
        Artifact::Fig8,
        Artifact::Summary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Artifact::Fig2 => "fig2",
            Artifact::Table1 => "table1",
            Artifact::Table2 => "table2",
            Artifact::Fig3 => "fig3",
            Artifact::Fig4 => "fig4",
            Artifact::Fig5 => "fig5",
            Artifact::Fig6 => "fig6",
            Artifact::Fig7 => "fig7",
            Artifact::Fig8 => "fig8",
            Artifact::Summary => "summary",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Artifact::Fig2 => "MNIST: regular, negative and shifted-label training",
            Artifact::Table1 => "CIFAR10: regular, negative and shifted-label training",
            Artifact::Table2 => "Accuracy on negatives with and without batch normalization",
            Artifact::Fig3 => "Class exclusion: accuracy on negatives of the excluded class",
            Artifact::Fig4 => "Second-layer feature maps of a regular digit 9 and its negative",
            Artifact::Fig5 => "Diversity of negative training images",
            Artifact::Fig6 => "Training with two datasets and with random images",
            Artifact::Fig7 => "MNIST negative accuracy versus notMNIST image pairs",
            Artifact::Fig8 => "Initialization on notMNIST, then fine-tuning on MNIST",
            Artifact::Summary => "All stored results",
        }
    }
}

impl fmt::Display for Artifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Artifact {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Artifact::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<&str> = Artifact::ALL.iter().map(|a| a.name()).collect();
                Error::InvalidArgument(format!("unknown report `{s}`; choose from {}", names.join(", ")))
            })
    }
}

/// Where a table cell's number came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRef {
    pub row: usize,
    pub column: usize,
    pub experiment_id: String,
    pub config_hash: String,
    pub key: String,
    pub mean: f64,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub refs: Vec<CellRef>,
    pub notes: Vec<String>,
}

/// `mean ± std`, each in shortest round-trip form.
pub fn format_aggregate(a: &Aggregate) -> String {
    match a.std {
        Some(s) => format!("{} ± {}", a.mean, s),
        None => a.mean.to_string(),
    }
}

const MISSING: &str = "n/a";

impl Table {
    fn new(title: impl Into<String>, header: &[&str]) -> Self {
        Self {
            title: title.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            refs: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Adds a row; `cells` are `(result, key)` lookups after the leading labels.
    fn push(&mut self, labels: &[&str], cells: Vec<Option<(&ExperimentResult, String)>>) {
        let row = self.rows.len();
        let mut out: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        for (i, cell) in cells.into_iter().enumerate() {
            let column = labels.len() + i;
            match cell.and_then(|(r, key)| r.aggregate(&key).map(|a| (r, key, a))) {
                Some((r, key, a)) => {
                    out.push(format_aggregate(a));
                    self.refs.push(CellRef {
                        row,
                        column,
                        experiment_id: r.experiment_id.clone(),
                        config_hash: r.config_hash.clone(),
                        key,
                        mean: a.mean,
                        std: a.std,
                    });
                }
                None => out.push(MISSING.into()),
            }
        }
        self.rows.push(out);
    }

    pub fn markdown(&self) -> String {
        let mut s = format!("### {}\n\n", self.title);
        s.push_str(&format!("| {} |\n", self.header.join(" | ")));
        s.push_str(&format!("|{}\n", "---|".repeat(self.header.len())));
        for r in &self.rows {
            s.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        for n in &self.notes {
            s.push_str(&format!("\n{n}\n"));
        }
        s
    }
}

/// The selected stored results, newest complete per experiment and sweep point.
pub struct ResultSet {
    results: Vec<ExperimentResult>,
}

impl ResultSet {
    pub fn new(results: Vec<ExperimentResult>) -> Self {
        Self { results }
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    pub fn results(&self) -> &[ExperimentResult] {
        &self.results
    }

    pub fn get(&self, id: &str) -> Option<&ExperimentResult> {
        self.results
            .iter()
            .rev()
            .find(|r| r.experiment_id == id && r.config.sweep_point.is_none())
    }

    /// Result of `id` at a sweep value.
    pub fn at(&self, id: &str, value: &SweepValue) -> Option<&ExperimentResult> {
        self.results.iter().rev().find(|r| {
            r.experiment_id == id && r.config.sweep_point.as_ref().is_some_and(|p| &p.value == value)
        })
    }

    fn cell(&self, id: &str, key: &str) -> Option<(&ExperimentResult, String)> {
        self.get(id).map(|r| (r, key.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub artifact: Artifact,
    pub title: String,
    pub files: Vec<String>,
    pub experiments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub dir: PathBuf,
    pub tables: Vec<(Artifact, Table)>,
    pub plots: Vec<(Artifact, PathBuf)>,
    pub manifest: Vec<ManifestEntry>,
}

fn e123_tables(set: &ResultSet, dataset: &str, families: &[&str]) -> Vec<Table> {
    let mut out = Vec::new();
    for family in families {
        let ids: Vec<String> = (1..=3).map(|e| format!("e{e}-{dataset}-{family}")).collect();
        let mut t = Table::new(
            format!("{family} on {dataset}"),
            &["Test data", "Experiment 1", "Experiment 2", "Experiment 3"],
        );
        for (label, key) in [
            ("Regular images", "regular-test.accuracy"),
            ("Negative images", "negative-test.accuracy"),
            ("Negative images with modified labels", "negative-test-shifted.accuracy"),
            ("Training accuracy (selected epoch)", "train.train_accuracy"),
        ] {
            t.push(&[label], ids.iter().map(|id| set.cell(id, key)).collect());
        }
        t.notes.push(format!("Experiments: {}.", ids.join(", ")));
        out.push(t);
    }
    out
}

fn table2(set: &ResultSet) -> Table {
    let mut t = Table::new(
        Artifact::Table2.title(),
        &["Dataset", "Model", "Case 1 w/o BN", "Case 1 with BN", "Case 2 w/o BN", "Case 2 with BN"],
    );
    let mut notes = Vec::new();
    for (dataset, family, label) in [("mnist", "mlp2", "MLP (2 layers)"), ("mnist", "svgg", "CNN"), ("cifar10", "svgg", "CNN")] {
        let row = t.rows.len();
        let mut cells: Vec<String> = vec![dataset.into(), label.into()];
        for (i, bn) in ["-nobn", ""].iter().enumerate() {
            let id = format!("e1-{dataset}-{family}{bn}");
            match set.get(&id).and_then(|r| r.aggregate("negative-test.accuracy").map(|a| (r, a))) {
                Some((r, a)) => {
                    cells.push(format_aggregate(a));
                    t.refs.push(CellRef {
                        row,
                        column: 2 + i,
                        experiment_id: r.experiment_id.clone(),
                        config_hash: r.config_hash.clone(),
                        key: "negative-test.accuracy".into(),
                        mean: a.mean,
                        std: a.std,
                    });
                }
                None => cells.push(MISSING.into()),
            }
        }
        for (i, bn) in ["-nobn", ""].iter().enumerate() {
            let mut means = Vec::new();
            for c in 0..10 {
                let id = format!("excl-{dataset}-{family}{bn}-c{c}");
                if let Some((r, a)) = set.get(&id).and_then(|r| r.aggregate("excluded-negative.accuracy").map(|a| (r, a))) {
                    means.push(a.mean);
                    t.refs.push(CellRef {
                        row,
                        column: 4 + i,
                        experiment_id: r.experiment_id.clone(),
                        config_hash: r.config_hash.clone(),
                        key: "excluded-negative.accuracy".into(),
                        mean: a.mean,
                        std: a.std,
                    });
                }
            }
            if means.is_empty() {
                cells.push(MISSING.into());
            } else {
                let avg = means.iter().sum::<f64>() / means.len() as f64;
                cells.push(format!("{avg} ({} classes)", means.len()));
                if means.len() < 10 {
                    notes.push(format!("{dataset} {label} case 2{bn}: {} of 10 excluded classes stored.", means.len()));
                }
            }
        }
        t.rows.push(cells);
    }
    t.notes.push("Case 1: trained on regular images, tested on negative test images. Case 2: trained on all regular images plus negatives of nine classes, tested on negatives of the excluded class; the cell averages the stored per-class means.".into());
    t.notes.extend(notes);
    t
}

fn fig3(set: &ResultSet) -> Table {
    let variants = [
        ("excl-mnist-svgg", "MNIST CNN"),
        ("excl-mnist-svgg-nobn", "MNIST CNN w/o BN"),
        ("excl-mnist-mlp2", "MNIST MLP"),
        ("excl-mnist-mlp2-nobn", "MNIST MLP w/o BN"),
        ("excl-cifar10-svgg", "CIFAR10 CNN"),
        ("excl-cifar10-svgg-nobn", "CIFAR10 CNN w/o BN"),
    ];
    let mut header = vec!["Excluded class"];
    header.extend(variants.iter().map(|v| v.1));
    let mut t = Table::new(Artifact::Fig3.title(), &header);
    for c in 0..10 {
        let label = c.to_string();
        t.push(
            &[&label],
            variants
                .iter()
                .map(|(p, _)| set.cell(&format!("{p}-c{c}"), "excluded-negative.accuracy"))
                .collect(),
        );
    }
    let mut reg = Table::new("Regularization on the digit-9 exclusion", &["Experiment", "Excluded negatives", "Regular test"]);
    for r in set.results().iter().filter(|r| r.experiment_id.starts_with("reg-excl-")) {
        reg.push(
            &[&r.experiment_id],
            vec![
                Some((r, "excluded-negative.accuracy".into())),
                Some((r, "regular-test.accuracy".into())),
            ],
        );
    }
    t.notes.push(reg.markdown());
    t
}

fn fig4(set: &ResultSet) -> Table {
    let mut t = Table::new(
        Artifact::Fig4.title(),
        &["Model", "Mean relative difference (regular vs negative row)", "Grid files"],
    );
    for (id, label) in [("e1-mnist-svgg", "Regular images only"), ("excl-mnist-svgg-c9", "Plus negatives of classes 0-8")] {
        let row = t.rows.len();
        t.push(&[label], vec![set.cell(id, "activation.mean_relative_difference")]);
        let files: Vec<String> = set
            .get(id)
            .map(|r| r.runs.iter().filter_map(|x| x.activation.as_ref()?.grid_file.clone()).collect())
            .unwrap_or_default();
        t.rows[row].push(if files.is_empty() { MISSING.into() } else { files.join(", ") });
    }
    t
}

fn diversity_points(set: &ResultSet) -> Vec<(String, &ExperimentResult)> {
    set.results()
        .iter()
        .filter(|r| r.experiment_id == "diversity-mnist")
        .map(|r| {
            let label = match &r.config.sweep_point {
                Some(p) => format!("classes {}", p.value),
                None => "classes [0,1,2,3]".into(),
            };
            (label, r)
        })
        .collect()
}

fn fig5(set: &ResultSet, dir: &Path) -> Result<(Table, Vec<PathBuf>)> {
    let mut t = Table::new(
        Artifact::Fig5.title(),
        &["Negatives drawn from", "Own excluded classes", "Classes 8 and 9", "Regular test", "Negative test"],
    );
    let points = diversity_points(set);
    let mut series = Vec::new();
    for (label, r) in &points {
        t.push(
            &[label],
            ["excluded-negative", "common-excluded-negative", "regular-test", "negative-test"]
                .iter()
                .map(|k| Some((*r, format!("{k}.accuracy"))))
                .collect(),
        );
        let pts = (0..10)
            .filter_map(|c| {
                r.aggregate(&format!("negative-test.class{c}.accuracy"))
                    .map(|a| (c as f64, a.mean, a.std))
            })
            .collect();
        series.push(Series {
            name: label.clone(),
            points: pts,
        });
    }
    let mut files = Vec::new();
    if !series.is_empty() {
        let path = dir.join("fig5.png");
        LinePlot {
            title: "Per-class accuracy on MNIST negative test images".into(),
            x_label: "class".into(),
            y_label: "accuracy".into(),
            log_x: false,
            y_range: Some((0.0, 1.0)),
            series,
        }
        .render(&path)?;
        files.push(path);
    }
    Ok((t, files))
}

fn fig6(set: &ResultSet) -> Table {
    let mut t = Table::new(
        Artifact::Fig6.title(),
        &["Experiment", "MNIST regular test", "MNIST negative test", "Random negatives", "Random regular"],
    );
    for id in ["two-dataset-20", "two-dataset-10", "random-aug", "random-neg"] {
        t.push(
            &[id],
            ["regular-test", "negative-test", "random-negative", "random-regular"]
                .iter()
                .map(|k| set.cell(id, &format!("{k}.accuracy")))
                .collect(),
        );
    }
    t
}

fn count_points(set: &ResultSet) -> Vec<(usize, &ExperimentResult)> {
    let mut pts: Vec<(usize, &ExperimentResult)> = set
        .results()
        .iter()
        .filter(|r| r.experiment_id == "count-sweep-mnist")
        .filter_map(|r| match &r.config.sweep_point {
            Some(p) => match p.value {
                SweepValue::Count(n) => Some((n, r)),
                _ => None,
            },
            None => None,
        })
        .collect();
    pts.sort_by_key(|p| p.0);
    pts.dedup_by_key(|p| p.0);
    pts
}

fn fig7(set: &ResultSet, dir: &Path) -> Result<(Table, Vec<PathBuf>)> {
    let mut t = Table::new(Artifact::Fig7.title(), &["notMNIST pairs N", "MNIST negative test", "MNIST regular test"]);
    let pts = count_points(set);
    let mut curve = Vec::new();
    let mut baseline = None;
    for (n, r) in &pts {
        let label = n.to_string();
        t.push(
            &[&label],
            vec![
                Some((*r, "negative-test.accuracy".into())),
                Some((*r, "regular-test.accuracy".into())),
            ],
        );
        if let Some(a) = r.aggregate("negative-test.accuracy") {
            if *n == 0 {
                baseline = Some(a.clone());
            } else {
                curve.push((*n as f64, a.mean, a.std));
            }
        }
    }
    let mut files = Vec::new();
    if !curve.is_empty() {
        let mut series = vec![Series {
            name: "MNIST negative accuracy".into(),
            points: curve.clone(),
        }];
        if let Some(b) = baseline {
            let (lo, hi) = (curve[0].0, curve[curve.len() - 1].0);
            series.push(Series {
                name: "N = 0".into(),
                points: vec![(lo, b.mean, b.std), (hi, b.mean, b.std)],
            });
        }
        let path = dir.join("fig7.png");
        LinePlot {
            title: Artifact::Fig7.title().into(),
            x_label: "notMNIST regular + negative pairs (log scale)".into(),
            y_label: "MNIST negative test accuracy".into(),
            log_x: true,
            y_range: Some((0.0, 1.0)),
            series,
        }
        .render(&path)?;
        files.push(path);
    }
    Ok((t, files))
}

fn fig8(set: &ResultSet, dir: &Path) -> Result<(Table, Vec<PathBuf>)> {
    let mut t = Table::new(
        Artifact::Fig8.title(),
        &["Case", "MNIST regular test", "MNIST negative test", "Mean KL on MNIST test"],
    );
    let mut files = Vec::new();
    let mut kl_series = Vec::new();
    for (case, id) in [("1", "init-finetune-case1"), ("2", "init-finetune-case2")] {
        t.push(
            &[case],
            vec![
                set.cell(id, "regular-test.accuracy"),
                set.cell(id, "negative-test.accuracy"),
                set.cell(id, "regular-test.mean_kl"),
            ],
        );
        let Some(r) = set.get(id) else { continue };
        if r.tracking.is_empty() {
            continue;
        }
        let x = |p: &crate::experiments::TrackAggregate| (p.global_epoch + 1) as f64;
        let series = vec![
            Series {
                name: "MNIST regular".into(),
                points: r.tracking.iter().map(|p| (x(p), p.regular_accuracy.mean, p.regular_accuracy.std)).collect(),
            },
            Series {
                name: "MNIST negative".into(),
                points: r.tracking.iter().map(|p| (x(p), p.negative_accuracy.mean, p.negative_accuracy.std)).collect(),
            },
        ];
        kl_series.push(Series {
            name: format!("case {case}"),
            points: r.tracking.iter().map(|p| (x(p), p.mean_kl.mean, p.mean_kl.std)).collect(),
        });
        let panel = if case == "1" { "a" } else { "b" };
        let path = dir.join(format!("fig8{panel}.png"));
        LinePlot {
            title: format!("Accuracy versus epoch, case {case}"),
            x_label: "epoch (both phases)".into(),
            y_label: "accuracy".into(),
            log_x: false,
            y_range: Some((0.0, 1.0)),
            series,
        }
        .render(&path)?;
        files.push(path);
    }
    if !kl_series.is_empty() {
        let path = dir.join("fig8c.png");
        LinePlot {
            title: "KL between outputs on MNIST regular and negative images".into(),
            x_label: "epoch (both phases)".into(),
            y_label: "mean KL".into(),
            log_x: false,
            y_range: None,
            series: kl_series,
        }
        .render(&path)?;
        files.push(path);
    }
    Ok((t, files))
}

fn summary(set: &ResultSet) -> Table {
    let mut t = Table::new(
        Artifact::Summary.title(),
        &["Experiment", "Sweep point", "Hash", "Seeds", "Regular test", "Negative test"],
    );
    for r in set.results() {
        let point = r.config.sweep_point.as_ref().map_or("-".to_string(), |p| format!("{}={}", p.parameter.name(), p.value));
        let seeds = r.runs.iter().map(|x| x.seed.to_string()).collect::<Vec<_>>().join(",");
        t.push(
            &[&r.experiment_id, &point, &r.config_hash[..8], &seeds],
            vec![
                Some((r, "regular-test.accuracy".into())),
                Some((r, "negative-test.accuracy".into())),
            ],
        );
    }
    t
}

/// Renders the selected artifacts from the newest complete results in `store` into `out`.
pub fn render_reports(store: &ResultStore, selection: &[Artifact], out: &Path) -> Result<ReportBundle> {
    let set = ResultSet::new(store.latest_complete()?);
    render_from(&set, selection, out)
}

pub fn render_from(set: &ResultSet, selection: &[Artifact], out: &Path) -> Result<ReportBundle> {
    if set.is_empty() {
        return Err(Error::NoResults(
            "the store holds no complete results; run an experiment first".into(),
        ));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let mut bundle = ReportBundle {
        dir: out.to_path_buf(),
        tables: Vec::new(),
        plots: Vec::new(),
        manifest: Vec::new(),
    };
    for &artifact in selection {
        let (tables, plots) = match artifact {
            Artifact::Fig2 => (e123_tables(set, "mnist", &["svgg", "mlp1", "mlp2", "softmax"]), Vec::new()),
            Artifact::Table1 => (e123_tables(set, "cifar10", &["svgg"]), Vec::new()),
            Artifact::Table2 => (vec![table2(set)], Vec::new()),
            Artifact::Fig3 => (vec![fig3(set)], Vec::new()),
            Artifact::Fig4 => (vec![fig4(set)], Vec::new()),
            Artifact::Fig5 => {
                let (t, p) = fig5(set, out)?;
                (vec![t], p)
            }
            Artifact::Fig6 => (vec![fig6(set)], Vec::new()),
            Artifact::Fig7 => {
                let (t, p) = fig7(set, out)?;
                (vec![t], p)
            }
            Artifact::Fig8 => {
                let (t, p) = fig8(set, out)?;
                (vec![t], p)
            }
            Artifact::Summary => (vec![summary(set)], Vec::new()),
        };
        let md_path = out.join(format!("{}.md", artifact.name()));
        let mut md = format!("## {}\n\n", artifact.title());
        for t in &tables {
            md.push_str(&t.markdown());
            md.push('\n');
        }
        fs::write(&md_path, &md).map_err(|e| Error::io(md_path.display().to_string(), e))?;
        let refs_path = out.join(format!("{}.cells.csv", artifact.name()));
        let mut w = csv::Writer::from_path(&refs_path).map_err(|e| Error::Plot(e.to_string()))?;
        w.write_record(["table", "row", "column", "experiment_id", "config_hash", "key", "mean", "std"])
            .map_err(|e| Error::Plot(e.to_string()))?;
        let mut experiments = Vec::new();
        for (ti, t) in tables.iter().enumerate() {
            for r in &t.refs {
                w.write_record([
                    ti.to_string(),
                    r.row.to_string(),
                    r.column.to_string(),
                    r.experiment_id.clone(),
                    r.config_hash.clone(),
                    r.key.clone(),
                    r.mean.to_string(),
                    r.std.map_or(String::new(), |s| s.to_string()),
                ])
                .map_err(|e| Error::Plot(e.to_string()))?;
                if !experiments.contains(&r.experiment_id) {
                    experiments.push(r.experiment_id.clone());
                }
            }
        }
        w.flush().map_err(|e| Error::io(refs_path.display().to_string(), e))?;
        let mut files = vec![file_name(&md_path), file_name(&refs_path)];
        for p in &plots {
            files.push(file_name(p));
            files.push(file_name(&p.with_extension("csv")));
            bundle.plots.push((artifact, p.clone()));
        }
        bundle.manifest.push(ManifestEntry {
            artifact,
            title: artifact.title().into(),
            files,
            experiments,
        });
        bundle.tables.extend(tables.into_iter().map(|t| (artifact, t)));
    }
    let manifest_path = out.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_vec_pretty(&bundle.manifest)?)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(bundle)
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}
