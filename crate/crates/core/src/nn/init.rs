//! Seeded Kaiming-uniform initialization.

use super::{c, Float};
use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Slope assumed by the gain computation; matches the leaky ReLU default.
pub const LEAKY_SLOPE: f64 = 0.01;

fn bound(fan_in: usize) -> f64 {
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    gain * (3.0 / fan_in as f64).sqrt()
}

fn uniform<F: Float>(rng: &mut ChaCha20Rng, b: f64) -> F {
    c::<F>(rng.random_range(-b..b))
}

pub fn conv_weights<F: Float>(
    rng: &mut ChaCha20Rng,
    out_ch: usize,
    in_ch: usize,
    k: usize,
) -> Array4<F> {
    let b = bound(in_ch * k * k);
    Array4::from_shape_simple_fn((out_ch, in_ch, k, k), || uniform(rng, b))
}

pub fn linear_weights<F: Float>(rng: &mut ChaCha20Rng, out: usize, input: usize) -> Array2<F> {
    let b = bound(input);
    Array2::from_shape_simple_fn((out, input), || uniform(rng, b))
}

pub fn zero_bias<F: Float>(n: usize) -> Array1<F> {
    Array1::zeros(n)
}
