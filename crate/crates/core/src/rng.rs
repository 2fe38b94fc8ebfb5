//! Deterministic RNG derivation.
//!
//! All randomness in the pipeline flows from one run seed plus a list of
//! integer tags (epoch, step, sample slot, purpose). Deriving streams
//! statelessly keeps parallel data preparation and checkpoint resume
//! bit-reproducible without serializing generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PURPOSE_INIT: u64 = 0x01;
pub const PURPOSE_PK: u64 = 0x02;
pub const PURPOSE_AUGMENT: u64 = 0x03;
pub const PURPOSE_NOISE: u64 = 0x04;
pub const PURPOSE_TOY: u64 = 0x05;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a tag path into a derived 64-bit seed.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ t.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}

/// Derive an independent generator from `seed` and a tag path.
pub fn derive(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}
