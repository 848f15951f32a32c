//! Image files, figure rendering, and CSV emission.

pub mod pgm;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::RealTensor;
use pgm::ImageFile;

/// Alpha weight of the energy layer in overlays.
pub const OVERLAY_ALPHA: f64 = 0.6;

/// Blend a normalized energy map over a grayscale image:
/// out = (1 - alpha) * img + alpha * energy / max(energy), clamped to [0, 1].
pub fn render_overlay(img: &ImageFile, energy: &RealTensor) -> Result<ImageFile> {
    let (h, w) = energy.hw()?;
    if (img.height, img.width) != (h, w) {
        return Err(Error::Shape(format!(
            "overlay extents {h}x{w} do not match image {}x{}",
            img.height, img.width
        )));
    }
    let peak = energy.data().iter().cloned().fold(0.0f64, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let blended = img.pixels.zip(
        &energy.clone().reshape(&[img.height, img.width])?,
        |pixel, e| ((1.0 - OVERLAY_ALPHA) * pixel + OVERLAY_ALPHA * e * scale).clamp(0.0, 1.0),
    )?;
    ImageFile::from_tensor(blended)
}

/// Write a CSV file with a header row. Values are emitted exactly as given,
/// so repeated runs with identical inputs produce identical bytes.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Format a float for CSV output with full round-trip precision.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.12e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_energy_overlay_scales_the_image_down() {
        let img = ImageFile::from_tensor(RealTensor::filled(&[4, 4], 0.5)).unwrap();
        let energy = RealTensor::zeros(&[4, 4]);
        let out = render_overlay(&img, &energy).unwrap();
        assert!(out.pixels.data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn constant_energy_brightens_uniformly_and_clamps() {
        let img = ImageFile::from_tensor(RealTensor::filled(&[4, 4], 0.9)).unwrap();
        let energy = RealTensor::filled(&[4, 4], 1.0);
        let out = render_overlay(&img, &energy).unwrap();
        let expect = (0.4 * 0.9 + 0.6f64).min(1.0);
        assert!(out.pixels.data().iter().all(|v| (v - expect).abs() < 1e-15));
        assert!(out.pixels.data().iter().all(|&v| v <= 1.0));
    }

    #[test]
    fn extent_mismatch_is_an_error() {
        let img = ImageFile::from_tensor(RealTensor::zeros(&[4, 4])).unwrap();
        let energy = RealTensor::zeros(&[8, 8]);
        assert!(render_overlay(&img, &energy).is_err());
    }
}
