//! Training objective (MSE), evaluation metrics (PSNR, SSIM), and the
//! phase-regularization losses.
//!
//! All functions are pure; metric evaluation over many images reduces in a
//! deterministic order.

use crate::error::{Error, Result};
use crate::nn::{ops, DiffTensor};
use crate::tensor::RealTensor;

/// PSNR reported when the error is exactly zero.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Evaluation summary over a set of images.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
    pub per_image: Vec<ImageMetrics>,
}

#[derive(Clone, Debug)]
pub struct ImageMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl MetricReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        MetricReport {
            psnr_db: per_image.iter().map(|m| m.psnr_db).sum::<f64>() / n,
            ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / n,
            mse: per_image.iter().map(|m| m.mse).sum::<f64>() / n,
            per_image,
        }
    }

    pub fn psnr_std(&self) -> f64 {
        let n = self.per_image.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.psnr_db;
        (self
            .per_image
            .iter()
            .map(|m| (m.psnr_db - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64)
            .sqrt()
    }

    pub fn ssim_std(&self) -> f64 {
        let n = self.per_image.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.ssim;
        (self
            .per_image
            .iter()
            .map(|m| (m.ssim - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64)
            .sqrt()
    }
}

/// Differentiable mean squared error.
pub fn mse_loss(pred: &DiffTensor, target: &DiffTensor) -> Result<DiffTensor> {
    let diff = ops::sub(pred, target)?;
    let sq = ops::mul(&diff, &diff)?;
    ops::mean_all(&sq)
}

pub fn mse(pred: &RealTensor, target: &RealTensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse on {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB: 10 log10(peak^2 / mse), capped at
/// 100 dB when the error vanishes.
pub fn psnr(pred: &RealTensor, target: &RealTensor, peak: f64) -> Result<f64> {
    let err = mse(pred, target)?;
    if err == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Mean structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, over valid window positions.
pub fn ssim(pred: &RealTensor, target: &RealTensor) -> Result<f64> {
    ssim_with_peak(pred, target, 1.0)
}

pub fn ssim_with_peak(pred: &RealTensor, target: &RealTensor, peak: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "ssim on {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    let (h, w) = pred.hw()?;
    if h < WIN || w < WIN {
        return Err(Error::Config(format!(
            "ssim needs extents >= {WIN}, got {h}x{w}"
        )));
    }
    let window = gaussian_window(WIN, SIGMA);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let plane = h * w;
    let planes = pred.len() / plane;

    // separable gaussian filtering, valid mode
    let filter_valid = |img: &[f64]| -> Vec<f64> {
        let wo = w - WIN + 1;
        let ho = h - WIN + 1;
        let mut rows = vec![0.0; h * wo];
        for y in 0..h {
            for x in 0..wo {
                let mut acc = 0.0;
                for (k, wk) in window.iter().enumerate() {
                    acc += wk * img[y * w + x + k];
                }
                rows[y * wo + x] = acc;
            }
        }
        let mut out = vec![0.0; ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0.0;
                for (k, wk) in window.iter().enumerate() {
                    acc += wk * rows[(y + k) * wo + x];
                }
                out[y * wo + x] = acc;
            }
        }
        out
    };

    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..planes {
        let a = &pred.data()[p * plane..(p + 1) * plane];
        let b = &target.data()[p * plane..(p + 1) * plane];
        let a2: Vec<f64> = a.iter().map(|v| v * v).collect();
        let b2: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(a);
        let mu_b = filter_valid(b);
        let m_a2 = filter_valid(&a2);
        let m_b2 = filter_valid(&b2);
        let m_ab = filter_valid(&ab);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_a2[i] - ma * ma;
            let vb = m_b2[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Periodic-safe angular penalty: rho(theta) = 1 - cos(theta). Smooth,
/// 2pi-periodic, zero exactly at aligned phases.
fn rho(diff: &DiffTensor) -> Result<DiffTensor> {
    let c = ops::cos(diff);
    let one = diff.tape().constant(RealTensor::filled(&c.shape(), 1.0));
    ops::sub(&one, &c)
}

/// Phase total variation: mean of rho over circular horizontal and vertical
/// phase differences, averaged over the two directions.
pub fn phase_tv_loss(phase: &DiffTensor) -> Result<DiffTensor> {
    let dx = ops::sub(&ops::circular_shift(phase, 0, -1)?, phase)?;
    let dy = ops::sub(&ops::circular_shift(phase, -1, 0)?, phase)?;
    let tx = ops::mean_all(&rho(&dx)?)?;
    let ty = ops::mean_all(&rho(&dy)?)?;
    Ok(ops::scale(&ops::add(&tx, &ty)?, 0.5))
}

/// Cross-scale phase alignment: mean of rho over fine-to-coarse phase
/// differences for consecutive scales. At stride-1 resolution all scales
/// share extents, so the downsampling step defaults to the identity; with
/// `pool`, the finer map is 2x average-pooled and compared to the coarser
/// map pooled to the same extents.
pub fn phase_align_loss(phases: &[DiffTensor], pool: bool) -> Result<DiffTensor> {
    if phases.len() < 2 {
        return Err(Error::Config(format!(
            "phase alignment needs at least two scales, got {}",
            phases.len()
        )));
    }
    let mut terms = Vec::new();
    for pair in phases.windows(2) {
        let (fine, coarse) = (&pair[0], &pair[1]);
        let diff = if pool {
            let f = ops::avg_pool2(fine)?;
            let c = ops::avg_pool2(coarse)?;
            ops::sub(&f, &c)?
        } else {
            ops::sub(fine, coarse)?
        };
        terms.push(ops::mean_all(&rho(&diff)?)?);
    }
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = ops::add(&acc, t)?;
    }
    Ok(ops::scale(&acc, 1.0 / terms.len() as f64))
}
