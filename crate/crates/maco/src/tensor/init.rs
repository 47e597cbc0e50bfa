//! Weight initializers. Sampling happens in f64 and is cast to the target
//! precision, so a given seed produces the same parameters (up to rounding)
//! at every precision.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};

/// Normal(0, 1 / fan_in); used for dense weights.
pub fn lecun_normal<F: Scalar, R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<F> {
    assert!(fan_in > 0, "fan_in must be positive");
    sample_normal(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

/// Normal(0, 2 / (fan_in + fan_out)); used for convolution kernels.
pub fn glorot_normal<F: Scalar, R: Rng>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<F> {
    assert!(fan_in + fan_out > 0, "fans must be positive");
    sample_normal(shape, (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

fn sample_normal<F: Scalar, R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| F::from_f64(normal.sample(rng))).collect();
    Tensor::from_parts(shape, data)
}
