//! Seeded parameter initialisers.

use msenet_tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::seed;

/// He-normal: `N(0, 2 / fan_in)`, suited to ReLU layers.
pub fn kaiming_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng_seed: u64) -> Tensor<T> {
    let mut rng = seed::rng(rng_seed);
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut rng)))
}

/// `U(-1/√fan_in, 1/√fan_in)`, the default for linear projections.
pub fn uniform_fan_in<T: Scalar>(shape: &[usize], fan_in: usize, rng_seed: u64) -> Tensor<T> {
    let mut rng = seed::rng(rng_seed);
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}
