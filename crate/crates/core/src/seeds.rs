//! Deterministic seed derivation and small sampling helpers.
//!
//! Every random decision in the pipeline draws from a stream derived from the
//! master seed by `derive(master, tag)` or `derive_idx(master, tag, i)`.
//! The splitting rule is a splitmix64 mix of the master seed with an FNV-1a
//! hash of the tag, so worker seeds are reproducible and independent of
//! scheduling.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed for a named stream.
pub fn derive(master: u64, tag: &str) -> u64 {
    splitmix64(master ^ fnv1a(tag.as_bytes()))
}

/// Derive a child seed for the `i`-th element of a named stream
/// (per-sample seeds: `seed_i = hash(master, i)`).
pub fn derive_idx(master: u64, tag: &str, i: u64) -> u64 {
    splitmix64(derive(master, tag).wrapping_add(splitmix64(i)))
}

/// The RNG used everywhere; ChaCha8 is portable and fully deterministic.
pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw via Box-Muller. Deterministic given the stream.
pub fn normal(rng: &mut Stream) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Truncated normal: resample until |z| <= 2, then scale by `std`.
pub fn trunc_normal(rng: &mut Stream, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
