//! Deterministic per-replica random streams.
//!
//! Replica `i` of a run with master seed `s` always draws from the stream
//! seeded by [`replica_seed`]`(s, i)`, so results never depend on how
//! replicas are scheduled across threads.

use rand::SeedableRng;
use rand_pcg::Pcg64Mcg;

/// Generator used throughout the crate.
pub type SimRng = Pcg64Mcg;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replica `index` under `master`.
pub fn replica_seed(master: u64, index: u64) -> u64 {
    mix64(mix64(master) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn replica_rng(master: u64, index: u64) -> SimRng {
    rng_from_seed(replica_seed(master, index))
}
