//! Deterministic seed fan-out.
//!
//! A single user seed is expanded into independent stream seeds by hashing
//! `(base, tag, index...)` with SplitMix64 finalizers. Streams used by the
//! library:
//!
//! | tag | stream |
//! |-----|--------|
//! | 1   | Hutchinson probes, per fixed-point evaluation |
//! | 2   | posterior draws, per draw index |
//! | 3   | simulated fields, per task |
//! | 4   | simulated noise, per subject and run |
//! | 5   | subject translations |
//! | 6   | prior field draws |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_PROBES: u64 = 1;
pub const TAG_DRAWS: u64 = 2;
pub const TAG_FIELDS: u64 = 3;
pub const TAG_NOISE: u64 = 4;
pub const TAG_SHIFT: u64 = 5;
pub const TAG_PRIOR: u64 = 6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the stream identified by `path` under `base`.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}
