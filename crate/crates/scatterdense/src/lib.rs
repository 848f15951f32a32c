//! Phase-aware stride-1 wavelet scattering encoder-decoder for dense
//! prediction (grayscale image denoising), with a desk-scale training,
//! ablation, and robustness harness.
//!
//! The encoder is a fixed cascade of complex Morlet wavelet convolutions and
//! modulus nonlinearities computed at full spatial resolution, with per-scale
//! Gaussian smoothing and polar (magnitude, phase) skip connections. The
//! learned half is a small convolutional decoder: a bottleneck projection,
//! per-scale phase-informed gating, three-source fusion, and an output
//! projection, all trained with a minimal reverse-mode autodiff engine.
//!
//! Entry points:
//! - [`filterbank::FilterBank`] builds the fixed wavelet bank.
//! - [`encoder::scatter`] runs the scattering encoder.
//! - [`harness::train`] trains a denoiser from an experiment config.
//! - [`cli`] exposes the `scatterdense` command-line surface.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fft;
pub mod filterbank;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sdtn;
pub mod tensor;

pub use error::{Error, Result};
