//! Seeded, counter-based randomness threaded explicitly through stochastic ops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, Tensor};

pub type WmRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> WmRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` under `seed`; identical (seed, stream) pairs
/// always yield identical draws regardless of what else was sampled.
pub fn stream(seed: u64, stream: u64) -> WmRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal<T: Scalar>(rng: &mut WmRng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64c(rng.sample::<f64, _>(StandardNormal)))
}

pub fn normal_scaled<T: Scalar>(rng: &mut WmRng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64c(std * rng.sample::<f64, _>(StandardNormal)))
}

pub fn uniform<T: Scalar>(rng: &mut WmRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64c(rng.random_range(lo..hi)))
}
