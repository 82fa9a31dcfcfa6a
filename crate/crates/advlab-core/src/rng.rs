//! Deterministic randomness and hashing.
//!
//! Every stochastic component draws from a ChaCha8 stream whose seed is
//! derived from the run seed and a purpose label. Purpose separation keeps
//! unrelated features (data synthesis, init, attack starts, augmentation
//! noise) from consuming each other's draws, so toggling one feature cannot
//! shift another's stream.

use rand_chacha::rand_core::{RngCore, SeedableRng};
pub use rand_chacha::ChaCha8Rng;

/// splitmix64 step; used to derive per-purpose seeds from a master seed.
pub fn splitmix64(state: &mut u64) {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
}

fn splitmix64_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a purpose label. Same label, same
/// child; different labels decorrelate.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut state = seed ^ fnv1a64(label.as_bytes());
    splitmix64(&mut state);
    splitmix64_mix(state)
}

/// ChaCha8 stream for one purpose.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Uniform draw in [0, 1) with 53 random mantissa bits.
pub fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in [lo, hi).
pub fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform_f64(rng)
}

/// Standard normal draw via Box-Muller. One value per call; the paired
/// value is discarded to keep call counts position-independent.
pub fn normal_f64(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1 = uniform_f64(rng);
        let u2 = uniform_f64(rng);
        if u1 > 0.0 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Glorot-uniform draw: fan-based symmetric range s = sqrt(6/(fan_in+fan_out)).
pub fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| uniform_in(rng, -s, s)).collect()
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// FNV-1a over the little-endian bytes of a f64 slice.
pub fn fnv1a64_f64s(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}
