//! Seeded parameter initialization.
//!
//! All draws happen in `f64` and are cast into the working element type, so an
//! `f32` and an `f64` network built from the same seed start at the same values.

use super::{fromf, Scalar};
use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Box-Muller standard normal; avoids pulling a distributions crate for one draw.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// He-normal (fan-out) init for convolution kernels.
pub fn conv_weight<F: Scalar>(
    out_c: usize,
    in_c: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Array4<F> {
    let fan_out = (out_c * k * k) as f64;
    let std = (2.0 / fan_out).sqrt();
    Array4::from_shape_simple_fn((out_c, in_c, k, k), || fromf(standard_normal(rng) * std))
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for fully connected weights.
pub fn linear_weight<F: Scalar>(out_f: usize, in_f: usize, rng: &mut ChaCha8Rng) -> Array2<F> {
    let bound = 1.0 / (in_f as f64).sqrt();
    Array2::from_shape_simple_fn((out_f, in_f), || fromf(rng.random_range(-bound..bound)))
}

/// Bias init matching the fully connected weight bound.
pub fn linear_bias<F: Scalar>(out_f: usize, in_f: usize, rng: &mut ChaCha8Rng) -> Array1<F> {
    let bound = 1.0 / (in_f as f64).sqrt();
    Array1::from_shape_simple_fn(out_f, || fromf(rng.random_range(-bound..bound)))
}
