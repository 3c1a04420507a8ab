//! Counter-based seeding. Every stochastic draw in a run is keyed by a tuple
//! such as `(seed, epoch, index, stream)`, so results never depend on how many
//! draws happened before or on how work was split between workers.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Named sub-streams so unrelated consumers never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Shuffle = 1,
    Views = 2,
    StudentViews = 3,
    Init = 4,
    Probe = 5,
    Synth = 6,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5151_D15C_0DE5_EED5, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn keyed_rng(seed: u64, stream: Stream, parts: &[u64]) -> ChaCha8Rng {
    let mut key = mix(&[seed, stream as u64]);
    for &p in parts {
        key = mix(&[key, p]);
    }
    ChaCha8Rng::seed_from_u64(key)
}

/// Uniform in [0, 1).
pub fn uniform<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn uniform_range<R: RngCore>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

/// Standard normal via Box-Muller.
pub fn normal<R: RngCore>(rng: &mut R) -> f64 {
    let u1 = 1.0 - uniform(rng);
    let u2 = uniform(rng);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Uniform integer in [0, n).
pub fn below<R: RngCore>(rng: &mut R, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

pub fn shuffle<T, R: RngCore>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
