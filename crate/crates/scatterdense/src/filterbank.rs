//! Fixed complex Morlet filter bank with Gaussian low-passes, built in the
//! Fourier domain at full image extent.
//!
//! Construction follows the usual reference parameterization for 2-D
//! scattering banks: center frequency 3pi/4 * 2^-j, spatial envelope std
//! 0.8 * 2^j, orientations theta_k = k*pi/L over [0, pi), and anisotropy
//! `slant` stretching the envelope by 1/slant orthogonally to the
//! oscillation (so the Fourier support narrows by `slant` in that
//! direction). The DC correction makes every wavelet exactly zero-mean and
//! the peak Fourier magnitude is normalized to 1.

use crate::error::{Error, Result};
use crate::fft::fft2;
use crate::tensor::{ComplexTensor, RealTensor};

pub const CENTER_FREQUENCY: f64 = 3.0 * std::f64::consts::PI / 4.0;
pub const SIGMA_BASE: f64 = 0.8;

/// Grid periods folded in when sampling a filter spatially; widened when the
/// envelope is large relative to the image so the folded tails stay below
/// roundoff.
fn periodization_window(sigma: f64, height: usize, width: usize) -> i64 {
    let min_extent = height.min(width) as f64;
    ((8.0 * sigma / min_extent).ceil() as i64).max(2)
}

/// Immutable bank of Fourier-domain filters, shareable across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub scales: usize,
    pub orientations: usize,
    pub slant: f64,
    pub height: usize,
    pub width: usize,
    /// psi_hat[j][theta], each of shape (H, W), for j in 0..scales.
    pub psi_hat: Vec<Vec<ComplexTensor>>,
    /// phi_hat[j] for j in 0..=scales; the last entry is the global
    /// reference low-pass.
    pub phi_hat: Vec<ComplexTensor>,
}

/// Empirical frame certificate over the frequency grid.
#[derive(Clone, Debug)]
pub struct FrameReport {
    pub lower: f64,
    pub upper: f64,
    pub energy: RealTensor,
}

fn check_slant(slant: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&slant) || !slant.is_finite() {
        return Err(Error::Config(format!(
            "slant must lie in [0, 1], got {slant}"
        )));
    }
    Ok(())
}

/// Periodized spatial samples of a modulated anisotropic Gaussian centered
/// at the origin of the (H, W) torus. `xi = 0` gives the plain envelope.
fn sampled_gabor(
    height: usize,
    width: usize,
    sigma: f64,
    angle: f64,
    xi: f64,
    slant: f64,
) -> ComplexTensor {
    let (cos_t, sin_t) = (angle.cos(), angle.sin());
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let s_sq = slant * slant;
    let window = periodization_window(sigma, height, width);
    let mut out = ComplexTensor::zeros(&[height, width]);
    for row in 0..height {
        for col in 0..width {
            let mut acc_re = 0.0;
            let mut acc_im = 0.0;
            for ey in -window..=window {
                for ex in -window..=window {
                    let y = row as f64 + (ey * height as i64) as f64;
                    let x = col as f64 + (ex * width as i64) as f64;
                    // coordinates rotated so x' runs along the oscillation
                    let xr = x * cos_t + y * sin_t;
                    let yr = -x * sin_t + y * cos_t;
                    let quad = (xr * xr + s_sq * yr * yr) * inv_two_sigma_sq;
                    if quad > 700.0 {
                        continue; // exp underflows to zero anyway
                    }
                    let mag = (-quad).exp();
                    let phase = xi * xr;
                    acc_re += mag * phase.cos();
                    acc_im += mag * phase.sin();
                }
            }
            let idx = row * width + col;
            out.re_mut()[idx] = acc_re;
            out.im_mut()[idx] = acc_im;
        }
    }
    out
}

/// Verify the spectrum is real (true for these filters up to roundoff) and
/// drop the imaginary residue.
fn realify(mut hat: ComplexTensor, what: &str) -> Result<ComplexTensor> {
    let scale = hat.max_abs().max(1e-300);
    let worst = hat.im().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if worst > 1e-8 * scale {
        return Err(Error::Divergence(format!(
            "{what}: non-real spectrum (max imag {worst:.3e} vs scale {scale:.3e})"
        )));
    }
    hat.im_mut().fill(0.0);
    Ok(hat)
}

/// Project the spectrum onto its real part. The continuous transform of an
/// even envelope is exactly real; for decaying envelopes the discrete
/// residue is below roundoff, and for the slant=0 cylinder (which has no
/// decay along one axis) this projection is what defines the filter.
fn hermitian_project(mut hat: ComplexTensor) -> ComplexTensor {
    hat.im_mut().fill(0.0);
    hat
}

/// Fourier-domain Morlet at an explicit orientation angle (radians).
///
/// The DC bin is forced to exactly zero (admissibility) and the peak
/// Fourier magnitude is normalized to 1.
pub fn build_morlet_at_angle(
    scale: usize,
    angle: f64,
    slant: f64,
    height: usize,
    width: usize,
) -> Result<ComplexTensor> {
    check_slant(slant)?;
    let sigma = SIGMA_BASE * (1 << scale) as f64;
    let xi = CENTER_FREQUENCY / (1 << scale) as f64;
    let modulated = sampled_gabor(height, width, sigma, angle, xi, slant);
    let envelope = sampled_gabor(height, width, sigma, angle, 0.0, slant);
    let mod_hat = fft2(&modulated)?;
    let env_hat = fft2(&envelope)?;
    // subtract the envelope scaled to cancel the DC response exactly
    let dc_env = env_hat.re()[0];
    let k_re = mod_hat.re()[0] / dc_env;
    let k_im = mod_hat.im()[0] / dc_env;
    let n = height * width;
    let mut hat = ComplexTensor::zeros(&[height, width]);
    for i in 0..n {
        hat.re_mut()[i] = mod_hat.re()[i] - (k_re * env_hat.re()[i] - k_im * env_hat.im()[i]);
        hat.im_mut()[i] = mod_hat.im()[i] - (k_re * env_hat.im()[i] + k_im * env_hat.re()[i]);
    }
    let hat = hermitian_project(hat);
    let peak = hat.max_abs();
    if peak <= 0.0 {
        return Err(Error::Config(format!(
            "degenerate morlet (scale {scale}, angle {angle}): zero spectrum"
        )));
    }
    Ok(hat.scale(1.0 / peak))
}

/// Fourier-domain Morlet for orientation index `theta` out of `orientations`
/// samples of [0, pi).
pub fn build_morlet(
    scale: usize,
    theta: usize,
    orientations: usize,
    slant: f64,
    height: usize,
    width: usize,
) -> Result<ComplexTensor> {
    if orientations == 0 || theta >= orientations {
        return Err(Error::Config(format!(
            "orientation index {theta} out of range for L={orientations}"
        )));
    }
    let angle = theta as f64 * std::f64::consts::PI / orientations as f64;
    build_morlet_at_angle(scale, angle, slant, height, width)
}

/// Fourier-domain isotropic Gaussian low-pass with spatial std 0.8 * 2^j and
/// unit DC gain; the imaginary plane is identically zero.
pub fn build_gaussian(scale: usize, height: usize, width: usize) -> Result<ComplexTensor> {
    let sigma = SIGMA_BASE * (1 << scale) as f64;
    let envelope = sampled_gabor(height, width, sigma, 0.0, 0.0, 1.0);
    let hat = realify(fft2(&envelope)?, "gaussian")?;
    let dc = hat.re()[0];
    Ok(hat.scale(1.0 / dc))
}

impl FilterBank {
    /// Build the full bank: scales x orientations wavelets plus low-passes
    /// phi_0 .. phi_scales. Construction is deterministic; identical
    /// arguments produce bit-identical banks.
    pub fn build(
        scales: usize,
        orientations: usize,
        slant: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        check_slant(slant)?;
        if scales > 0 && orientations == 0 {
            return Err(Error::Config("need at least one orientation".into()));
        }
        let mut psi_hat = Vec::with_capacity(scales);
        for j in 0..scales {
            let mut row = Vec::with_capacity(orientations);
            for theta in 0..orientations {
                row.push(build_morlet(j, theta, orientations, slant, height, width)?);
            }
            psi_hat.push(row);
        }
        let mut phi_hat = Vec::with_capacity(scales + 1);
        for j in 0..=scales {
            phi_hat.push(build_gaussian(j, height, width)?);
        }
        Ok(FilterBank {
            scales,
            orientations,
            slant,
            height,
            width,
            psi_hat,
            phi_hat,
        })
    }

    /// The global reference low-pass at scale 2^J.
    pub fn phi_global(&self) -> &ComplexTensor {
        &self.phi_hat[self.scales]
    }

    /// A slant of exactly zero builds a bank with no orthogonal frequency
    /// coverage; accepted, but callers should surface this.
    pub fn is_degenerate(&self) -> bool {
        self.slant == 0.0
    }

    pub fn wavelet_count(&self) -> usize {
        self.scales * self.orientations
    }
}

/// Frequency-domain energy map of the whole bank:
/// E(w) = |phi_J(w)|^2 + 1/2 * sum_{j,theta} (|psi(w)|^2 + |psi(-w)|^2),
/// reported with its grid minimum (lower) and maximum (upper).
pub fn littlewood_paley(bank: &FilterBank) -> FrameReport {
    let h = bank.height;
    let w = bank.width;
    let mut energy = RealTensor::zeros(&[h, w]);
    {
        let phi = bank.phi_global();
        let data = energy.data_mut();
        for i in 0..h * w {
            let (r, im) = (phi.re()[i], phi.im()[i]);
            data[i] += r * r + im * im;
        }
    }
    for row in &bank.psi_hat {
        for psi in row {
            let data = energy.data_mut();
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let ineg = ((h - y) % h) * w + ((w - x) % w);
                    let m_pos = psi.re()[i] * psi.re()[i] + psi.im()[i] * psi.im()[i];
                    let m_neg = psi.re()[ineg] * psi.re()[ineg] + psi.im()[ineg] * psi.im()[ineg];
                    data[i] += 0.5 * (m_pos + m_neg);
                }
            }
        }
    }
    let lower = energy.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let upper = energy.data().iter().cloned().fold(0.0f64, f64::max);
    FrameReport {
        lower,
        upper,
        energy,
    }
}
