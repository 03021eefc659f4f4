//! Keyed random streams.
//!
//! Every random choice in the crate is drawn from a stream whose seed is a
//! pure function of a master seed, a tag naming the purpose of the stream,
//! and the identity of the object that consumes it (a vertex, a frog, a
//! tick). Streams never depend on the order in which objects are visited.

use rand::SeedableRng;
use rand_pcg::Pcg64Mcg;

/// Generator used for every per-object stream.
pub type StreamRng = Pcg64Mcg;

pub const TAG_OFFSPRING: u64 = 0x6f66_6673_7072_6e67;
pub const TAG_OFFSPRING_EXTRA: u64 = 0x6f66_6673_6578_7472;
pub const TAG_SLEEPERS: u64 = 0x736c_6565_7065_7273;
pub const TAG_FROG: u64 = 0x6672_6f67_7374_726d;
pub const TAG_TIE: u64 = 0x7469_6562_7265_616b;
pub const TAG_BIRTH: u64 = 0x6269_7274_6863_6e74;
pub const TAG_BIRTH_FROG: u64 = 0x6269_7274_6866_7267;
pub const TAG_REPLICA: u64 = 0x7265_706c_6963_6173;
pub const TAG_TREE: u64 = 0x7472_6565_7365_6564;
pub const TAG_SIM: u64 = 0x7369_6d73_6565_6473;
pub const TAG_RAY: u64 = 0x6861_726d_7261_7973;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive combination of two keys.
#[inline]
pub fn combine(h: u64, x: u64) -> u64 {
    mix64(h.rotate_left(23) ^ mix64(x.wrapping_add(GOLDEN)))
}

/// Folds a list of words into a key.
pub fn key_of(words: &[u64]) -> u64 {
    words.iter().fold(GOLDEN, |h, &w| combine(h, w))
}

/// A uniform in `[0, 1)` derived from a key without building a generator.
#[inline]
pub fn unit_f64(key: u64) -> f64 {
    (mix64(key ^ GOLDEN) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn stream(key: u64) -> StreamRng {
    StreamRng::seed_from_u64(key)
}
