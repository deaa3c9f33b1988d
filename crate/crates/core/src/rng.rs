//! Deterministic stream derivation.
//!
//! Every random quantity in the crate is drawn from a generator whose seed is
//! a pure function of a master seed and a stream label, so results never
//! depend on scheduling or on the number of worker threads.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// Generator used for all simulations.
pub type SimRng = Xoshiro256PlusPlus;

/// SplitMix64 finalizer: a bijective avalanche mix of 64 bits.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a running hash with one more word.
#[inline]
pub fn mix_pair(h: u64, word: u64) -> u64 {
    mix64(h ^ mix64(word))
}

/// Map 64 random bits to a uniform number in `[0, 1)`.
#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Independent generator for stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    SimRng::seed_from_u64(mix_pair(mix64(seed), stream))
}

/// Generator for a labelled sub-stream (e.g. replica `i` of purpose `tag`).
pub fn substream_rng(seed: u64, tag: u64, index: u64) -> SimRng {
    SimRng::seed_from_u64(mix_pair(mix_pair(mix64(seed), tag), index))
}
