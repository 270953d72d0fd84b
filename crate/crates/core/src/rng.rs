//! Deterministic random streams.
//!
//! Every consumer of randomness derives its own stream from the experiment
//! seed plus a path of integers (round, client id, purpose tag). Results are
//! therefore independent of scheduling order and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags mixed into stream paths so that, e.g., the local shuffling
/// stream and the DP noise stream of one client never coincide.
pub mod tag {
    pub const INIT: u64 = 0x1;
    pub const SAMPLE_CLIENTS: u64 = 0x2;
    pub const LOCAL_SHUFFLE: u64 = 0x3;
    pub const DP_NOISE: u64 = 0x4;
    pub const DISTILL: u64 = 0x5;
    pub const PARTITION: u64 = 0x6;
    pub const BLOBS: u64 = 0x7;
    pub const PROBE: u64 = 0x8;
    pub const DEMO: u64 = 0x9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes `seed` and `path` into a single 64-bit stream key.
pub fn stream_key(seed: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(stream_key(seed, path))
}
