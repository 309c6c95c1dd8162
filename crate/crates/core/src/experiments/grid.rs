//! Side-by-side feature maps of an image and its negative.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::datasets::{negate, ImageBatch};
use crate::error::{Error, Result};
use crate::models::{top_active_channels, FeatureMaps, Model};

/// Tiles are upscaled to at least this many pixels per side.
const MIN_TILE: usize = 56;
const GAP: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationGrid {
    pub channels: Vec<usize>,
    pub regular_bounds: Vec<(f32, f32)>,
    pub negative_bounds: Vec<(f32, f32)>,
    pub mean_relative_difference: f64,
    pub width: usize,
    pub height: usize,
    /// 8-bit grayscale, row-major.
    pub pixels: Vec<u8>,
}

fn bounds(map: &[f32]) -> (f32, f32) {
    map.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn relative_difference(a: &[f32], b: &[f32]) -> f64 {
    let (num, den) = a.iter().zip(b).fold((0.0f64, 0.0f64), |(n, d), (&x, &y)| {
        (n + f64::from((x - y).abs()), d + f64::from(x.abs() + y.abs()))
    });
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Builds the 2 x k grid: the `k` most active channels of `layer_id` on the
/// probe, then the same channels on its negative. Writes a PNG when `out` is given.
pub fn dump_activation_grid(
    model: &Model,
    probe: &ImageBatch,
    layer_id: &str,
    k: usize,
    out: Option<&Path>,
) -> Result<ActivationGrid> {
    let regular = model.activations(probe, layer_id)?;
    let negative = model.activations(&negate(probe), layer_id)?;
    let channels = top_active_channels(&regular, k)?;
    let (h, w) = (regular.height, regular.width);
    let scale = MIN_TILE.div_ceil(h.max(w)).max(1);
    let (th, tw) = (h * scale, w * scale);
    let width = k * tw + (k - 1) * GAP;
    let height = 2 * th + GAP;
    let mut pixels = vec![0u8; width * height];
    let mut draw = |maps: &FeatureMaps, row: usize| -> Vec<(f32, f32)> {
        channels
            .iter()
            .enumerate()
            .map(|(col, &c)| {
                let m = maps.channel(c);
                let (lo, hi) = bounds(m);
                for y in 0..th {
                    for x in 0..tw {
                        let v = m[(y / scale) * w + x / scale];
                        let level = if hi > lo {
                            ((v - lo) / (hi - lo) * 255.0).round() as u8
                        } else {
                            0
                        };
                        pixels[(row * (th + GAP) + y) * width + col * (tw + GAP) + x] = level;
                    }
                }
                (lo, hi)
            })
            .collect()
    };
    let regular_bounds = draw(&regular, 0);
    let negative_bounds = draw(&negative, 1);
    let mean_relative_difference = channels
        .iter()
        .map(|&c| relative_difference(regular.channel(c), negative.channel(c)))
        .sum::<f64>()
        / k as f64;
    if let Some(path) = out {
        write_gray_png(path, width, height, &pixels)?;
    }
    Ok(ActivationGrid {
        channels,
        regular_bounds,
        negative_bounds,
        mean_relative_difference,
        width,
        height,
        pixels,
    })
}

pub(crate) fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Plot(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(pixels)
        .map_err(|e| Error::Plot(format!("{}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Family, ModelSpec};

    fn probe() -> ImageBatch {
        let levels = (0..28 * 28).map(|i| ((i * 37) % 256) as u8).collect();
        ImageBatch::new(1, 28, 28, 1, levels).unwrap()
    }

    #[test]
    fn untrained_model_renders_ten_tiles() {
        let model = build_model(&ModelSpec::new(Family::Svgg, (28, 28, 1), 10), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        let g = dump_activation_grid(&model, &probe(), "conv2", 5, Some(&path)).unwrap();
        assert_eq!(g.channels.len(), 5);
        assert_eq!(g.regular_bounds.len() + g.negative_bounds.len(), 10);
        assert_eq!(g.width, 5 * 56 + 4 * GAP);
        assert_eq!(g.height, 2 * 56 + GAP);
        assert!((0.0..=1.0).contains(&g.mean_relative_difference));
        let decoder = png::Decoder::new(File::open(&path).unwrap());
        let reader = decoder.read_info().unwrap();
        assert_eq!(reader.info().width as usize, g.width);
    }

    #[test]
    fn relative_difference_bounds() {
        assert_eq!(relative_difference(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_difference(&[1.0, 0.0], &[0.0, 3.0]), 1.0);
        assert_eq!(relative_difference(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn bad_layer_and_k_are_errors() {
        let model = build_model(&ModelSpec::new(Family::Svgg, (28, 28, 1), 10), 3).unwrap();
        assert!(dump_activation_grid(&model, &probe(), "fc1", 5, None).is_err());
        assert!(dump_activation_grid(&model, &probe(), "conv1", 17, None).is_err());
    }
}
