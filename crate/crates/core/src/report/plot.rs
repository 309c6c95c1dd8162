//! Line plots with a CSV sidecar holding the plotted series.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;

use crate::error::{Error, Result};

/// Checked in order when `SHAPEBIAS_FONT` is unset.
const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Registers a TrueType font for plot text; `false` means plots are drawn without text.
pub fn font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let env = std::env::var_os("SHAPEBIAS_FONT").map(PathBuf::from);
        let candidates = env.into_iter().chain(FONT_CANDIDATES.iter().map(PathBuf::from));
        for path in candidates {
            if let Ok(bytes) = std::fs::read(&path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// `(x, y, std)`.
    pub points: Vec<(f64, f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub y_range: Option<(f64, f64)>,
    pub series: Vec<Series>,
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(23, 190, 207),
];

impl LinePlot {
    fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if self.log_x {
            x0 = x0.max(1e-3);
            x1 = x1.max(x0 * 10.0);
        }
        let y = self.y_range.unwrap_or_else(|| {
            let (a, b) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
            if !a.is_finite() {
                (0.0, 1.0)
            } else if b > a {
                let pad = (b - a) * 0.05;
                (a - pad, b + pad)
            } else {
                (a - 0.5, a + 0.5)
            }
        });
        ((x0, x1), y)
    }

    /// Writes `<path>` as PNG and `<path>.csv` with the series.
    pub fn render(&self, path: &Path) -> Result<PathBuf> {
        let text = font_available();
        let plot_err = |e: String| Error::Plot(format!("{}: {e}", path.display()));
        {
            let root = BitMapBackend::new(path, (800, 520)).into_drawing_area();
            root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
            let ((x0, x1), (y0, y1)) = self.bounds();
            let mut builder = ChartBuilder::on(&root);
            builder.margin(16);
            if text {
                builder
                    .caption(&self.title, ("sans-serif", 22))
                    .x_label_area_size(44)
                    .y_label_area_size(60);
            }
            macro_rules! draw {
                ($chart:expr) => {{
                    let mut chart = $chart;
                    let mut mesh = chart.configure_mesh();
                    if text {
                        mesh.x_desc(self.x_label.as_str()).y_desc(self.y_label.as_str());
                    } else {
                        mesh.x_labels(0).y_labels(0);
                    }
                    mesh.draw().map_err(|e| plot_err(e.to_string()))?;
                    for (i, s) in self.series.iter().enumerate() {
                        let color = PALETTE[i % PALETTE.len()];
                        let pts: Vec<(f64, f64)> = s
                            .points
                            .iter()
                            .filter(|p| !self.log_x || p.0 > 0.0)
                            .map(|p| (p.0, p.1))
                            .collect();
                        let line = chart
                            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                            .map_err(|e| plot_err(e.to_string()))?;
                        if text {
                            line.label(s.name.as_str()).legend(move |(x, y)| {
                                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
                            });
                        }
                        chart
                            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
                            .map_err(|e| plot_err(e.to_string()))?;
                    }
                    if text && !self.series.is_empty() {
                        chart
                            .configure_series_labels()
                            .background_style(WHITE.mix(0.85))
                            .border_style(BLACK)
                            .label_font(("sans-serif", 14))
                            .draw()
                            .map_err(|e| plot_err(e.to_string()))?;
                    }
                }};
            }
            if self.log_x {
                draw!(builder
                    .build_cartesian_2d((x0..x1).log_scale(), y0..y1)
                    .map_err(|e| plot_err(e.to_string()))?);
            } else {
                draw!(builder
                    .build_cartesian_2d(x0..x1, y0..y1)
                    .map_err(|e| plot_err(e.to_string()))?);
            }
            root.present().map_err(|e| plot_err(e.to_string()))?;
        }
        let sidecar = path.with_extension("csv");
        let mut w = csv::Writer::from_path(&sidecar).map_err(|e| Error::Plot(e.to_string()))?;
        w.write_record(["series", "x", "y", "std"])
            .map_err(|e| Error::Plot(e.to_string()))?;
        for s in &self.series {
            for (x, y, sd) in &s.points {
                w.write_record([
                    s.name.clone(),
                    x.to_string(),
                    y.to_string(),
                    sd.map_or(String::new(), |v| v.to_string()),
                ])
                .map_err(|e| Error::Plot(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| Error::io(sidecar.display().to_string(), e))?;
        Ok(sidecar)
    }
}
