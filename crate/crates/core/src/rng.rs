//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`RngState`] substream keyed by
//! a purpose tag and an index. The generator is ChaCha20 (`rand_chacha`), whose
//! output is specified bit-for-bit and does not depend on the platform. A
//! substream is selected by ChaCha's 64-bit stream id, derived from the tag
//! (FNV-1a) and the index (SplitMix64 finalizer), so the same
//! `(seed, tag, index)` always yields the same sequence regardless of which
//! worker asks for it or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngState {
    seed: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `(tag, index)`.
    pub fn stream(&self, tag: &str, index: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(splitmix64(fnv1a(tag) ^ splitmix64(index)));
        rng
    }

    /// A child state whose seed is derived from this one; used for held-out
    /// splits and per-job seeds.
    pub fn derive(&self, tag: &str, index: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ fnv1a(tag).rotate_left(17) ^ splitmix64(index)))
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
