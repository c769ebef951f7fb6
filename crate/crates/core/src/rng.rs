//! Seeding helpers. Every stochastic choice in the crate flows through a
//! `ChaCha8Rng` derived here so runs are reproducible bit-for-bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root RNG for a given seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream for a named purpose under one root seed.
/// Distinct salts give statistically independent streams.
pub fn substream(seed: u64, salt: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ hash64(salt.as_bytes()))
}

/// FNV-1a, used for stable string-to-seed mixing (not cryptographic).
pub fn hash64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
