//! Seed derivation. Every random stream is a pure function of the run seed
//! and a small tuple of stream coordinates (phase, iteration, epoch, ...), so
//! a resumed run draws exactly the numbers an uninterrupted run would.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_SHUFFLE: u64 = 2;
pub(crate) const STREAM_PRETRAIN: u64 = 3;
pub(crate) const STREAM_JOINT: u64 = 4;
pub(crate) const STREAM_KMEANS: u64 = 5;
pub(crate) const STREAM_SAMPLE: u64 = 6;
pub(crate) const STREAM_SYNTH: u64 = 7;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a seed with stream coordinates into a fresh 64-bit seed.
pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn derive_rng(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, coords))
}
