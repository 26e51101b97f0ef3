//! Binary PGM (P5) and PPM (P6) image export.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::PALETTE;

fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, channels: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height * channels {
        return Err(Error::ShapeMismatch {
            op: "write_pnm",
            lhs: vec![height, width, channels],
            rhs: vec![data.len()],
        });
    }
    let mut bytes = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    write_pnm(path.as_ref(), "P5", width, height, 1, gray)
}

/// `rgb` is interleaved, row-major.
pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_pnm(path.as_ref(), "P6", width, height, 3, rgb)
}

/// Gray level = class index.
pub fn write_class_pgm(path: impl AsRef<Path>, width: usize, height: usize, classes: &[usize]) -> Result<()> {
    let gray: Vec<u8> = classes.iter().map(|&c| c.min(255) as u8).collect();
    write_pgm(path, width, height, &gray)
}

pub fn class_colors(classes: &[usize]) -> Vec<u8> {
    classes
        .iter()
        .flat_map(|&c| PALETTE.get(c).copied().unwrap_or([255, 255, 255]))
        .collect()
}

pub fn write_class_ppm(path: impl AsRef<Path>, width: usize, height: usize, classes: &[usize]) -> Result<()> {
    write_ppm(path, width, height, &class_colors(classes))
}

/// Linear min-max scaling to 0..=255; NaN maps to 0.
pub fn heatmap_gray(values: &[f64]) -> Vec<u8> {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .iter()
        .map(|&v| if v.is_finite() { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// `[3, H, W]` image in `[0, 1]` to interleaved RGB bytes.
pub fn image_bytes(img: &crate::tensor::Tensor) -> Vec<u8> {
    let s = img.shape();
    let plane = s[1] * s[2];
    let d = img.data();
    (0..plane)
        .flat_map(|i| (0..3).map(move |ch| (d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect()
}
