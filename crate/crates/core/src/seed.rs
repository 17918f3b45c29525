//! Counter-based seed splitting.
//!
//! Every random stream in the crate is addressed by a master seed plus a path
//! of indices (cell, replication, worker, ...). The path is folded through
//! SplitMix64 so that streams are independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams for different purposes apart even when their
/// numeric paths coincide.
pub mod tag {
    pub const ROTATION: u64 = 0x524f_5441;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const WORKER: u64 = 0x574f_524b;
    pub const SHUFFLE: u64 = 0x5348_5546;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and an index path.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &i| splitmix64(acc ^ splitmix64(i)))
}

pub fn rng(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, path))
}
