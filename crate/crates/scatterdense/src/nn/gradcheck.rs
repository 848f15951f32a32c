//! Central finite-difference verification of analytic gradients.

use crate::tensor::RealTensor;

/// Default probe step for f64 central differences.
pub const FD_STEP: f64 = 1e-5;

/// Relative error between an analytic derivative and a central finite
/// difference of `loss` at the probed entries of `at`.
///
/// Returns the worst relative error over `points` (indices into the flat
/// tensor), using a small floor so near-zero derivative pairs compare
/// absolutely.
pub fn max_rel_error(
    loss: &mut dyn FnMut(&RealTensor) -> f64,
    at: &RealTensor,
    analytic: &RealTensor,
    points: &[usize],
    step: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for &i in points {
        let mut plus = at.clone();
        plus.data_mut()[i] += step;
        let mut minus = at.clone();
        minus.data_mut()[i] -= step;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
        let an = analytic.data()[i];
        let denom = fd.abs().max(an.abs()).max(1e-4);
        worst = worst.max((fd - an).abs() / denom);
    }
    worst
}

/// Deterministic probe points spread over a tensor of `len` entries.
pub fn probe_points(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = crate::rng::seeded_rng(seed, "gradcheck-points");
    use rand::Rng;
    (0..count.min(len)).map(|_| rng.gen_range(0..len)).collect()
}
