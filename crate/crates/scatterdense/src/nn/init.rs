//! Parameter initializers.
//!
//! Each parameter draws from its own `(seed, name)` random stream, so the
//! initialization of one layer never depends on which other layers exist.

use rand::Rng;

use crate::rng::seeded_rng;
use crate::tensor::RealTensor;

/// Kaiming-uniform fan-in initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
pub fn kaiming_uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> RealTensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = seeded_rng(seed, name);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    RealTensor::from_vec(shape, data).expect("init shape")
}

/// 3x3 convolution weight (C_out, C_in, 3, 3) with fan_in = C_in * 9.
pub fn conv3x3_weight(seed: u64, name: &str, c_out: usize, c_in: usize) -> RealTensor {
    kaiming_uniform(seed, name, &[c_out, c_in, 3, 3], c_in * 9)
}

pub fn zeros(shape: &[usize]) -> RealTensor {
    RealTensor::zeros(shape)
}

pub fn ones(shape: &[usize]) -> RealTensor {
    RealTensor::filled(shape, 1.0)
}
