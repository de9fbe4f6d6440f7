//! Deterministic derivation of independent random substreams.
//!
//! Every randomized step (simulation replicate, bootstrap replicate, Monte
//! Carlo batch) owns a ChaCha stream derived from the master seed and a tag
//! path, so results do not depend on execution order or thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a tag path into a single 64-bit stream seed.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for (i, &t) in tags.iter().enumerate() {
        let salted = t.wrapping_add((i as u64 + 1).wrapping_mul(0x61c8_8646_80b5_83eb));
        h = splitmix64(h ^ splitmix64(salted));
    }
    h
}

/// ChaCha8 stream for the given master seed and tag path.
pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tags))
}
