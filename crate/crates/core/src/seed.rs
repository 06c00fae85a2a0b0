//! Deterministic seed derivation.
//!
//! Every random draw in a run comes from a ChaCha stream whose seed is
//! derived from the base seed and a path of tags (trial, stage, candidate,
//! ...). Two runs that walk the same path see the same numbers, regardless
//! of which strategy or thread is doing the walking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed(pub u64);

impl Seed {
    pub fn new(value: u64) -> Self {
        Seed(value)
    }

    /// Derive an independent sub-seed for `tag`.
    pub fn child(self, tag: u64) -> Seed {
        Seed(splitmix64(self.0 ^ splitmix64(tag.wrapping_add(0x243F_6A88_85A3_08D3))))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Tags for the sub-streams used by the experiment loop.
pub mod tag {
    pub const DATASET: u64 = 1;
    pub const RUN: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SELECT: u64 = 4;
    pub const ENKF: u64 = 5;
    pub const RANDOM: u64 = 6;
    pub const JITTER: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
