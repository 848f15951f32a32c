//! 2-D discrete Fourier transforms over the last two axes, and the periodic
//! convolution built on them.
//!
//! Transforms are unnormalized: `ifft2(fft2(t)) = t * (H * W)`. Spatial
//! extents are restricted to powers of two; anything else is rejected as a
//! configuration error.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, RealTensor};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
}

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && (n & (n - 1)) == 0
}

fn check_extents(h: usize, w: usize) -> Result<()> {
    if !is_power_of_two(h) || !is_power_of_two(w) {
        return Err(Error::Config(format!(
            "spatial extents must be powers of two, got {h}x{w}"
        )));
    }
    Ok(())
}

fn transform(t: &ComplexTensor, direction: FftDirection) -> Result<ComplexTensor> {
    let (h, w) = t.hw()?;
    check_extents(h, w)?;
    let plane = h * w;
    let planes = t.len() / plane;

    let row_fft = plan(w, direction);
    let col_fft = plan(h, direction);
    let mut row_scratch = vec![Complex::default(); row_fft.get_inplace_scratch_len()];
    let mut col_scratch = vec![Complex::default(); col_fft.get_inplace_scratch_len()];

    let mut buf: Vec<Complex<f64>> = t
        .re()
        .iter()
        .zip(t.im())
        .map(|(&r, &i)| Complex::new(r, i))
        .collect();
    let mut col: Vec<Complex<f64>> = vec![Complex::default(); h];

    for p in 0..planes {
        let slice = &mut buf[p * plane..(p + 1) * plane];
        for row in slice.chunks_exact_mut(w) {
            row_fft.process_with_scratch(row, &mut row_scratch);
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = slice[y * w + x];
            }
            col_fft.process_with_scratch(&mut col, &mut col_scratch);
            for y in 0..h {
                slice[y * w + x] = col[y];
            }
        }
    }

    let re = buf.iter().map(|c| c.re).collect();
    let im = buf.iter().map(|c| c.im).collect();
    ComplexTensor::from_planes(t.shape(), re, im)
}

/// Unnormalized forward 2-D DFT over the last two axes.
pub fn fft2(t: &ComplexTensor) -> Result<ComplexTensor> {
    transform(t, FftDirection::Forward)
}

/// Unnormalized inverse 2-D DFT: `ifft2(fft2(t)) = t * (H * W)`.
pub fn ifft2(t: &ComplexTensor) -> Result<ComplexTensor> {
    transform(t, FftDirection::Inverse)
}

/// Circular convolution of `x` with the filter whose Fourier transform is
/// `h_hat` (rank-2, matching spatial extents). Stride 1, no subsampling.
pub fn cconv2(x: &ComplexTensor, h_hat: &ComplexTensor) -> Result<ComplexTensor> {
    let (h, w) = x.hw()?;
    let spectrum = fft2(x)?;
    let product = spectrum.mul_filter(h_hat)?;
    Ok(ifft2(&product)?.scale(1.0 / (h * w) as f64))
}

/// Circular convolution of a real tensor; returns the complex result
/// (complex filters produce genuinely complex outputs).
pub fn cconv2_real(x: &RealTensor, h_hat: &ComplexTensor) -> Result<ComplexTensor> {
    cconv2(&ComplexTensor::from_real(x), h_hat)
}
