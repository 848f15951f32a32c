//! Geometric perturbation robustness: rotations and circular translations
//! applied to the noisy input before denoising.

use crate::error::Result;
use crate::filterbank::FilterBank;
use crate::harness::dataset::Dataset;
use crate::harness::train::{denoise_image, TrainedModel};
use crate::metrics;
use crate::tensor::RealTensor;

/// Rotate about the image center with bilinear interpolation and toroidal
/// wrap (consistent with the periodic boundary model everywhere else).
pub fn rotate_bilinear_periodic(img: &RealTensor, degrees: f64) -> RealTensor {
    let (h, w) = img.hw().expect("image rank");
    if degrees == 0.0 {
        return img.clone();
    }
    let theta = degrees.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = RealTensor::zeros(img.shape());
    let sample = |y: f64, x: f64| -> f64 {
        let y0 = y.floor();
        let x0 = x.floor();
        let (fy, fx) = (y - y0, x - x0);
        let wrap = |v: i64, n: usize| -> usize { v.rem_euclid(n as i64) as usize };
        let (iy0, ix0) = (wrap(y0 as i64, h), wrap(x0 as i64, w));
        let (iy1, ix1) = (wrap(y0 as i64 + 1, h), wrap(x0 as i64 + 1, w));
        (1.0 - fy) * (1.0 - fx) * img.data()[iy0 * w + ix0]
            + (1.0 - fy) * fx * img.data()[iy0 * w + ix1]
            + fy * (1.0 - fx) * img.data()[iy1 * w + ix0]
            + fy * fx * img.data()[iy1 * w + ix1]
    };
    for y in 0..h {
        for x in 0..w {
            // inverse map: rotate output coordinates back into the source
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + dy * cos_t + dx * sin_t;
            let sx = cx - dy * sin_t + dx * cos_t;
            out.data_mut()[y * w + x] = sample(sy, sx);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct PerturbRow {
    pub kind: String,
    pub amount: f64,
    pub psnr: f64,
    pub drop_db: f64,
}

/// For each perturbation: perturb the noisy input (and the clean reference
/// identically), denoise, and report the PSNR drop against the unperturbed
/// evaluation, averaged over the held-out images.
pub fn perturbation_sweep(
    model: &TrainedModel,
    dataset: &Dataset,
    rotations: &[f64],
    translations: &[i64],
) -> Result<Vec<PerturbRow>> {
    let cfg = &model.config;
    let arch = cfg.model();
    let bank = FilterBank::build(
        cfg.scales,
        cfg.orientations,
        cfg.slant,
        cfg.image_size,
        cfg.image_size,
    )?;

    let mut base = 0.0;
    for pair in &dataset.val {
        let pred = denoise_image(&arch, &model.store, &bank, cfg.encoder_mode, &pair.noisy)?;
        base += metrics::psnr(&pred, &pair.clean, 1.0)?;
    }
    base /= dataset.val.len() as f64;

    let mut rows = Vec::new();
    for &deg in rotations {
        let mut acc = 0.0;
        for pair in &dataset.val {
            let noisy = rotate_bilinear_periodic(&pair.noisy, deg);
            let clean = rotate_bilinear_periodic(&pair.clean, deg);
            let pred = denoise_image(&arch, &model.store, &bank, cfg.encoder_mode, &noisy)?;
            acc += metrics::psnr(&pred, &clean, 1.0)?;
        }
        let psnr = acc / dataset.val.len() as f64;
        rows.push(PerturbRow {
            kind: "rotation".into(),
            amount: deg,
            psnr,
            drop_db: base - psnr,
        });
    }
    for &px in translations {
        let mut acc = 0.0;
        for pair in &dataset.val {
            let noisy = pair.noisy.circular_shift(px, px);
            let clean = pair.clean.circular_shift(px, px);
            let pred = denoise_image(&arch, &model.store, &bank, cfg.encoder_mode, &noisy)?;
            acc += metrics::psnr(&pred, &clean, 1.0)?;
        }
        let psnr = acc / dataset.val.len() as f64;
        rows.push(PerturbRow {
            kind: "translation".into(),
            amount: px as f64,
            psnr,
            drop_db: base - psnr,
        });
    }
    Ok(rows)
}
