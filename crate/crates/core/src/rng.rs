//! Deterministic random streams.
//!
//! Every random quantity in the crate is drawn from a stream addressed by a
//! master seed and a path of integer tags (repetition index, attempt, ...).
//! A stream is a ChaCha8 keystream keyed by the seed, with the 64-bit stream
//! id derived from the path, so any stream can be reconstructed independently
//! of the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain-separation tags for the top-level consumers of randomness.
pub mod tag {
    pub const DATA: u64 = 0x11;
    pub const EVAL: u64 = 0x12;
    pub const MCSA: u64 = 0x21;
    pub const PRETEST: u64 = 0x22;
    pub const CI_STAGE: u64 = 0x23;
    pub const CI_FINAL: u64 = 0x24;
    pub const PLASMODE: u64 = 0x31;
    pub const ORACLE: u64 = 0x41;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of tags into a single 64-bit value.
pub fn mix(path: &[u64]) -> u64 {
    path.iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Derives a child seed; used to hand a sub-seed to a nested driver.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    splitmix64(seed ^ mix(path).rotate_left(17))
}

/// Independent stream for `(seed, path)`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix(path));
    rng
}
