//! Deterministic seed fan-out.
//!
//! A single master seed is expanded into independent per-component streams
//! via `derive_seed(master, stream, counter)`: the stream tag is hashed with
//! FNV-1a, mixed with the counter, and finalized with SplitMix64. Every
//! random decision in the crate draws from a ChaCha generator seeded this
//! way, so any sub-experiment can be reproduced from the master seed alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(master, stream, counter)`.
pub fn derive_seed(master: u64, stream: &str, counter: u64) -> u64 {
    let tagged = master ^ fnv1a64(stream.as_bytes());
    splitmix64(splitmix64(tagged).wrapping_add(counter))
}

/// ChaCha generator for one derived stream.
pub fn rng_for(master: u64, stream: &str, counter: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, stream, counter))
}

/// ChaCha generator from a raw seed.
pub fn rng_from_seed(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Uniform draw in [0, 1) with 53-bit resolution.
pub fn uniform01(rng: &mut dyn rand::RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
