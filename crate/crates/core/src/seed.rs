//! Counter-based seed derivation.
//!
//! Every stochastic draw in the crate is a pure function of a root seed and a
//! path of counters (stream tag, item index, attempt), so results do not depend
//! on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with one more counter.
pub fn derive(seed: u64, counter: u64) -> u64 {
    splitmix(seed ^ splitmix(counter.wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Seed for a named stream, so unrelated consumers of one root seed never collide.
pub fn stream(seed: u64, tag: &str) -> u64 {
    tag.bytes().fold(derive(seed, 0xA5A5), |acc, b| derive(acc, b as u64))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_at(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, index))
}
