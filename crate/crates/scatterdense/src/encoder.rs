//! The fixed stride-1 scattering encoder.
//!
//! Orders 0-2 of the wavelet-modulus cascade at full spatial resolution,
//! channel aggregation with Frobenius energy normalization, and per-scale
//! polar (magnitude, phase) extraction of the pre-modulus first-order
//! coefficients for skip connections.
//!
//! Stateless and pure given `(input, bank)`; different images can be
//! encoded on different threads concurrently.

use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2};
use crate::filterbank::FilterBank;
use crate::tensor::{ComplexTensor, RealTensor};

/// Stabilizer added under the square root of the polar magnitude.
pub const POLAR_EPS: f64 = 1e-6;

/// Smoothing policy: `Stride1` smooths order m >= 1 at its own scale
/// (shift-equivariant outputs); `Invariant` smooths every order with the
/// global reference low-pass (the translation-invariant baseline), still
/// without subsampling so the decoder shape contract holds in both modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    Invariant,
    Stride1,
}

impl std::fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EncoderMode::Invariant => write!(f, "invariant"),
            EncoderMode::Stride1 => write!(f, "stride1"),
        }
    }
}

/// Which second-order paths are taken. The default keeps paths whose second
/// scale is strictly coarser (j2 > j1), the energy-decay-respecting rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SiblingRule {
    #[default]
    CoarserOnly,
}

/// Polar skip pair for one scale: magnitude and phase, each of shape
/// (B, C_in * L, H, W) with input channel outer, orientation inner.
#[derive(Clone, Debug)]
pub struct SkipPair {
    pub amplitude: RealTensor,
    pub phase: RealTensor,
}

/// Aggregated scattering coefficients plus per-scale polar skips.
#[derive(Clone, Debug)]
pub struct ScatterOutput {
    /// (B, K_in, H, W): normalized concatenation of the order-0, order-1,
    /// and order-2 blocks.
    pub s_agg: RealTensor,
    /// One (A_j, Phi_j) pair per scale j = 0..J-1.
    pub skips: Vec<SkipPair>,
    /// Unnormalized reference-order block x * phi_J, (B, C_in, H, W); the
    /// anchor for low-pass-residual prediction.
    pub s0: RealTensor,
    pub k_in: usize,
}

/// Total aggregated channel count:
/// C_in * (1 + J*L + sum_j K_siblings(j) * L^2), with K_siblings(j) = J-1-j
/// under the coarser-only rule.
pub fn count_channels(c_in: usize, scales: usize, orientations: usize, rule: SiblingRule) -> usize {
    let SiblingRule::CoarserOnly = rule;
    let second: usize = (0..scales)
        .map(|j| (scales - 1 - j) * orientations * orientations)
        .sum();
    c_in * (1 + scales * orientations + second)
}

/// All second-order paths (j1, theta1, j2, theta2) in aggregation order.
pub fn second_order_paths(
    scales: usize,
    orientations: usize,
    rule: SiblingRule,
) -> Vec<(usize, usize, usize, usize)> {
    let SiblingRule::CoarserOnly = rule;
    let mut paths = Vec::new();
    for j1 in 0..scales {
        for t1 in 0..orientations {
            for j2 in j1 + 1..scales {
                for t2 in 0..orientations {
                    paths.push((j1, t1, j2, t2));
                }
            }
        }
    }
    paths
}

/// Polar decomposition with stabilized magnitude:
/// A = sqrt(re^2 + im^2 + eps), Phi = atan2(im, re) in [-pi, pi],
/// with atan2(0, 0) = 0.
pub fn extract_polar(w: &ComplexTensor, eps: f64) -> Result<(RealTensor, RealTensor)> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("polar eps must be > 0, got {eps}")));
    }
    let n = w.len();
    let mut amp = vec![0.0; n];
    let mut phase = vec![0.0; n];
    for i in 0..n {
        let (re, im) = (w.re()[i], w.im()[i]);
        amp[i] = (re * re + im * im + eps).sqrt();
        phase[i] = if re == 0.0 && im == 0.0 {
            0.0
        } else {
            im.atan2(re)
        };
    }
    Ok((
        RealTensor::from_vec(w.shape(), amp)?,
        RealTensor::from_vec(w.shape(), phase)?,
    ))
}

fn as_bchw(x: &RealTensor) -> Result<RealTensor> {
    match x.rank() {
        2 => {
            let (h, w) = x.hw()?;
            x.clone().reshape(&[1, 1, h, w])
        }
        4 => Ok(x.clone()),
        _ => Err(Error::Shape(format!(
            "scatter input must be (H, W) or (B, C, H, W), got {:?}",
            x.shape()
        ))),
    }
}

/// Run the scattering encoder.
///
/// Order 0: S0 = x * phi_J. Order 1: S1 = |x * psi_j^theta| * phi. Order 2:
/// S2 over sibling paths j2 > j1, smoothed at scale j2. The smoothing scale
/// for orders >= 1 is per-scale in `Stride1` mode and the global reference
/// in `Invariant` mode. The aggregated tensor is rescaled so its total
/// energy matches the order-0 block. Skips carry the pre-modulus
/// first-order coefficients in polar form for every scale in both modes.
pub fn scatter(x: &RealTensor, bank: &FilterBank, mode: EncoderMode) -> Result<ScatterOutput> {
    let x4 = as_bchw(x)?;
    let (batch, c_in, height, width) = x4.dims4()?;
    if (height, width) != (bank.height, bank.width) {
        return Err(Error::Shape(format!(
            "input extents {height}x{width} do not match bank extents {}x{}",
            bank.height, bank.width
        )));
    }
    let scales = bank.scales;
    let orients = bank.orientations;
    let plane = height * width;
    let hw = plane as f64;
    let smooth_scale = |j: usize| match mode {
        EncoderMode::Stride1 => j,
        EncoderMode::Invariant => scales,
    };

    let paths2 = second_order_paths(scales, orients, SiblingRule::default());
    let k_in = count_channels(c_in, scales, orients, SiblingRule::default());
    let mut s_agg = RealTensor::zeros(&[batch, k_in, height, width]);
    let mut skips: Vec<SkipPair> = (0..scales)
        .map(|_| SkipPair {
            amplitude: RealTensor::zeros(&[batch, c_in * orients, height, width]),
            phase: RealTensor::zeros(&[batch, c_in * orients, height, width]),
        })
        .collect();

    // aggregation channel layout: order-0 block, then one channel per
    // (j, theta) path with c inner, then one channel per second-order path
    let chan_s0 = |c: usize| c;
    let chan_s1 = |j: usize, theta: usize, c: usize| c_in + (j * orients + theta) * c_in + c;
    let chan_s2 =
        |path_idx: usize, c: usize| c_in + scales * orients * c_in + path_idx * c_in + c;

    let mut s0_sq_sum = 0.0f64;
    let mut s0_block = RealTensor::zeros(&[batch, c_in, height, width]);

    for b in 0..batch {
        for c in 0..c_in {
            let p = b * c_in + c;
            let img = ComplexTensor::from_planes(
                &[height, width],
                x4.data()[p * plane..(p + 1) * plane].to_vec(),
                vec![0.0; plane],
            )?;
            let spec = fft2(&img)?;

            // order 0
            let s0 = ifft2(&spec.mul_filter(bank.phi_global())?)?.scale(1.0 / hw);
            let dst = (b * k_in + chan_s0(c)) * plane;
            s_agg.data_mut()[dst..dst + plane].copy_from_slice(s0.re());
            s0_block.data_mut()[p * plane..(p + 1) * plane].copy_from_slice(s0.re());
            s0_sq_sum += s0.re().iter().map(|v| v * v).sum::<f64>();

            // order 1 + skips; keep the |W1| spectra for order 2
            let mut u1_spectra: Vec<ComplexTensor> = Vec::with_capacity(scales * orients);
            for j in 0..scales {
                for theta in 0..orients {
                    let w1 = ifft2(&spec.mul_filter(&bank.psi_hat[j][theta])?)?.scale(1.0 / hw);
                    let (amp, phase) = extract_polar(&w1, POLAR_EPS)?;
                    let skip_chan = c * orients + theta;
                    let skip_dst = (b * c_in * orients + skip_chan) * plane;
                    skips[j].amplitude.data_mut()[skip_dst..skip_dst + plane]
                        .copy_from_slice(amp.data());
                    skips[j].phase.data_mut()[skip_dst..skip_dst + plane]
                        .copy_from_slice(phase.data());

                    let u1 = w1.modulus();
                    let u1_spec = fft2(&ComplexTensor::from_real(&u1))?;
                    let s1 = ifft2(&u1_spec.mul_filter(&bank.phi_hat[smooth_scale(j)])?)?
                        .scale(1.0 / hw);
                    let dst = (b * k_in + chan_s1(j, theta, c)) * plane;
                    s_agg.data_mut()[dst..dst + plane].copy_from_slice(s1.re());
                    u1_spectra.push(u1_spec);
                }
            }

            // order 2 over sibling paths
            for (path_idx, &(j1, t1, j2, t2)) in paths2.iter().enumerate() {
                let u1_spec = &u1_spectra[j1 * orients + t1];
                let w2 = ifft2(&u1_spec.mul_filter(&bank.psi_hat[j2][t2])?)?.scale(1.0 / hw);
                let u2 = w2.modulus();
                let u2_spec = fft2(&ComplexTensor::from_real(&u2))?;
                let s2 =
                    ifft2(&u2_spec.mul_filter(&bank.phi_hat[smooth_scale(j2)])?)?.scale(1.0 / hw);
                let dst = (b * k_in + chan_s2(path_idx, c)) * plane;
                s_agg.data_mut()[dst..dst + plane].copy_from_slice(s2.re());
            }
        }
    }

    // energy normalization: total energy matches the order-0 block
    let concat_norm = s_agg.frobenius_norm();
    let gamma = if concat_norm > 0.0 {
        s0_sq_sum.sqrt() / concat_norm
    } else {
        1.0
    };
    let s_agg = s_agg.scale(gamma);

    s_agg.check_finite("scattering aggregate")?;
    for pair in &skips {
        pair.amplitude.check_finite("skip amplitude")?;
        pair.phase.check_finite("skip phase")?;
    }

    Ok(ScatterOutput {
        s_agg,
        skips,
        s0: s0_block,
        k_in,
    })
}

/// Sum of |phase| over the first-scale orientations, with phase treated as
/// zero wherever the coefficient energy is below the polar stabilizer
/// (atan2 of pure roundoff is noise, not structure). Used for the
/// phase-energy visualization maps. Returns (B, H, W) collapsed over
/// orientations for the requested scale.
pub fn phase_energy_map(output: &ScatterOutput, scale: usize) -> Result<RealTensor> {
    let pair = output
        .skips
        .get(scale)
        .ok_or_else(|| Error::Config(format!("no skip scale {scale}")))?;
    let (b, ch, h, w) = pair.phase.dims4()?;
    let plane = h * w;
    let mut out = RealTensor::zeros(&[b, h, w]);
    for bi in 0..b {
        for c in 0..ch {
            let base = (bi * ch + c) * plane;
            for i in 0..plane {
                let amp = pair.amplitude.data()[base + i];
                // A^2 = |W|^2 + eps, so |W|^2 < eps <=> A^2 < 2 eps
                let significant = amp * amp >= 2.0 * POLAR_EPS;
                if significant {
                    out.data_mut()[bi * plane + i] += pair.phase.data()[base + i].abs();
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn random_image(n: usize, seed: u64) -> RealTensor {
        let mut rng = seeded_rng(seed, "encoder-test");
        RealTensor::from_vec(&[n, n], (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn channel_count_examples() {
        let rule = SiblingRule::default();
        assert_eq!(count_channels(1, 1, 8, rule), 9);
        assert_eq!(count_channels(1, 3, 8, rule), 217);
        assert_eq!(count_channels(3, 2, 4, rule), 75);
    }

    #[test]
    fn channel_count_matches_path_enumeration() {
        for &c_in in &[1usize, 3] {
            for &j in &[1usize, 2, 3] {
                for &l in &[4usize, 8] {
                    let rule = SiblingRule::default();
                    let enumerated =
                        c_in * (1 + j * l + second_order_paths(j, l, rule).len());
                    assert_eq!(count_channels(c_in, j, l, rule), enumerated);
                }
            }
        }
    }

    #[test]
    fn polar_examples() {
        let w = ComplexTensor::from_planes(&[2], vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        let (a, p) = extract_polar(&w, 1e-6).unwrap();
        assert!((a.data()[0] - (1.0f64 + 1e-6).sqrt()).abs() < 1e-15);
        assert_eq!(p.data()[0], 0.0);
        assert!((p.data()[1] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!(extract_polar(&w, 0.0).is_err());
    }

    #[test]
    fn polar_round_trip_recovers_cartesian() {
        let mut rng = seeded_rng(31, "polar");
        let n = 64;
        let w = ComplexTensor::from_planes(
            &[n],
            (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let eps = 1e-6;
        let (a, p) = extract_polar(&w, eps).unwrap();
        for i in 0..n {
            let r = (a.data()[i] * a.data()[i] - eps).max(0.0).sqrt();
            let re = r * p.data()[i].cos();
            let im = r * p.data()[i].sin();
            assert!((re - w.re()[i]).abs() < 1e-9);
            assert!((im - w.im()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_image_has_only_order_zero_energy() {
        let bank = FilterBank::build(2, 4, 0.5, 16, 16).unwrap();
        let c = 0.63;
        let x = RealTensor::filled(&[16, 16], c);
        let out = scatter(&x, &bank, EncoderMode::Stride1).unwrap();
        let plane = 256;
        // order-0 block: the constant itself (unit DC gain), gamma = 1
        for i in 0..plane {
            assert!((out.s_agg.data()[i] - c).abs() < 1e-10);
        }
        // all higher-order channels vanish (zero-mean wavelets)
        for k in 1..out.k_in {
            for i in 0..plane {
                assert!(out.s_agg.data()[k * plane + i].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn aggregate_energy_matches_order_zero_block() {
        use crate::fft::cconv2_real;
        let bank = FilterBank::build(3, 4, 0.5, 32, 32).unwrap();
        let x = random_image(32, 77);
        let out = scatter(&x, &bank, EncoderMode::Stride1).unwrap();
        // independent route to the raw order-0 block
        let s0_raw = cconv2_real(&x, bank.phi_global()).unwrap().re_tensor();
        let total = out.s_agg.frobenius_norm();
        let rel = (total - s0_raw.frobenius_norm()).abs() / s0_raw.frobenius_norm();
        assert!(
            rel < 1e-12,
            "normalized energy {total} vs order-0 energy {} (rel {rel:e})",
            s0_raw.frobenius_norm()
        );
    }

    #[test]
    fn stride1_scatter_is_shift_equivariant() {
        let bank = FilterBank::build(2, 4, 0.5, 32, 32).unwrap();
        let x = random_image(32, 5);
        let (dy, dx) = (3i64, 5i64);
        let a = scatter(&x.circular_shift(dy, dx), &bank, EncoderMode::Stride1).unwrap();
        let b = scatter(&x, &bank, EncoderMode::Stride1).unwrap();
        let diff = a
            .s_agg
            .sub(&b.s_agg.circular_shift(dy, dx))
            .unwrap()
            .max_abs();
        assert!(diff < 1e-9, "aggregate equivariance error {diff:e}");
        for j in 0..2 {
            let da = a.skips[j]
                .amplitude
                .sub(&b.skips[j].amplitude.circular_shift(dy, dx))
                .unwrap()
                .max_abs();
            let dp = a.skips[j]
                .phase
                .sub(&b.skips[j].phase.circular_shift(dy, dx))
                .unwrap()
                .max_abs();
            assert!(da < 1e-9, "amplitude skip equivariance error {da:e}");
            assert!(dp < 1e-9, "phase skip equivariance error {dp:e}");
        }
    }

    #[test]
    fn second_order_energy_decays_below_first_order() {
        let bank = FilterBank::build(3, 4, 0.5, 32, 32).unwrap();
        // piecewise-smooth test content: a bright disk on a dark background
        let n = 32;
        let mut img = RealTensor::zeros(&[n, n]);
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 - 15.5, x as f64 - 15.5);
                img.data_mut()[y * n + x] = if dy * dy + dx * dx < 64.0 { 0.8 } else { 0.2 };
            }
        }
        let out = scatter(&img, &bank, EncoderMode::Stride1).unwrap();
        let plane = n * n;
        let c1 = 3 * 4; // J * L first-order channels
        let first: f64 = out.s_agg.data()[plane..(1 + c1) * plane]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            / (c1 * plane) as f64;
        let c2 = out.k_in - 1 - c1;
        let second: f64 = out.s_agg.data()[(1 + c1) * plane..]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            / (c2 * plane) as f64;
        assert!(
            second < first,
            "second-order mean energy {second:e} not below first-order {first:e}"
        );
    }

    #[test]
    fn extent_mismatch_is_an_error() {
        let bank = FilterBank::build(2, 4, 0.5, 16, 16).unwrap();
        let x = random_image(32, 6);
        assert!(scatter(&x, &bank, EncoderMode::Stride1).is_err());
    }

    #[test]
    fn phase_energy_concentrates_on_edges() {
        let bank = FilterBank::build(1, 8, 0.5, 64, 64).unwrap();
        let n = 64;
        let mut img = RealTensor::zeros(&[n, n]);
        let (cy, cx, r) = (31.5f64, 31.5f64, 14.0f64);
        for y in 0..n {
            for x in 0..n {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                img.data_mut()[y * n + x] = if d < r { 0.85 } else { 0.15 };
            }
        }
        let out = scatter(&img, &bank, EncoderMode::Stride1).unwrap();
        let energy = phase_energy_map(&out, 0).unwrap();
        let mut near = (0.0, 0usize);
        let mut far = (0.0, 0usize);
        for y in 0..n {
            for x in 0..n {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                let v = energy.data()[y * n + x];
                if (d - r).abs() <= 2.0 {
                    near = (near.0 + v, near.1 + 1);
                } else {
                    far = (far.0 + v, far.1 + 1);
                }
            }
        }
        let near_mean = near.0 / near.1 as f64;
        let far_mean = far.0 / far.1 as f64;
        assert!(
            near_mean > 2.0 * far_mean,
            "edge mean {near_mean:e} not > 2x elsewhere mean {far_mean:e}"
        );
    }
}
