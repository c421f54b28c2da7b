use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Initializer {
    Zeros,
    Constant(f64),
    /// Truncated normal (±2σ) with σ = sqrt(1 / fan_in).
    FanIn(usize),
}

impl Initializer {
    pub fn build<S: Scalar, R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor<S> {
        match self {
            Initializer::Zeros => Tensor::zeros(shape),
            Initializer::Constant(c) => Tensor::full(shape, S::lit(c)),
            Initializer::FanIn(fan_in) => truncated_normal(shape, (1.0 / fan_in.max(1) as f64).sqrt(), rng),
        }
    }
}

/// Normal samples with standard deviation `std`, redrawn beyond two deviations.
pub fn truncated_normal<S: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<S> {
    let normal = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            break S::lit(x);
        }
    })
}
