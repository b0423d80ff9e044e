//! Deterministic seed derivation.
//!
//! Every stochastic component derives its generator from a master seed and a
//! stream position, so parallel and serial execution visit identical random
//! streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a master seed with stream coordinates into a child seed.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut acc = mix64(master ^ 0x517c_c1b7_2722_0a95);
    for p in parts {
        acc = mix64(acc ^ mix64(*p));
    }
    acc
}

/// Seeded generator for one independent stream.
pub fn stream_rng(master: u64, parts: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, parts))
}
