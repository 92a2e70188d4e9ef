//! Deterministic seed derivation.
//!
//! Every data generator and training loop draws from a ChaCha stream derived
//! from (base seed, stream tag, index), so regenerating any example or batch
//! is independent of everything generated before it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG for stream `tag`, element `index`, under a base seed.
pub fn derived_rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mixed = splitmix64(seed ^ splitmix64(tag_hash(tag)) ^ splitmix64(index.wrapping_mul(0x9e3779b97f4a7c15)));
    ChaCha8Rng::seed_from_u64(mixed)
}
