//! Seeded randomness helpers. Everything stochastic in the crate draws from a
//! [`SeededRng`] so runs are reproducible bit for bit.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
#[inline]
pub fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `0..n`.
pub fn below(rng: &mut impl RngCore, n: usize) -> usize {
    debug_assert!(n > 0);
    // rejection sampling keeps the draw unbiased
    let n64 = n as u64;
    let zone = u64::MAX - (u64::MAX % n64);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n64) as usize;
        }
    }
}

pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

/// Entries drawn from `U(-bound, bound)`.
pub fn uniform(rng: &mut impl RngCore, rows: usize, cols: usize, bound: f64) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = (2.0 * unit(rng) - 1.0) * bound;
    }
    t
}

/// Glorot-uniform initialisation for a `fan_in x fan_out` weight.
pub fn xavier(rng: &mut impl RngCore, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    uniform(rng, fan_in, fan_out, bound)
}

/// Draws an index from a normalised probability vector.
pub fn sample_categorical(rng: &mut impl RngCore, probs: &[f64]) -> usize {
    let u = unit(rng);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver of mass at the end
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}
