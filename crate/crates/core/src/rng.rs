//! Deterministic random streams.
//!
//! Every source of randomness in a run is derived from one user-supplied
//! 64-bit seed through named sub-streams (`init`, `negatives`, `noise`,
//! `shuffle`, `perturb`, ...), so individual stages can be reproduced or
//! bisected without replaying the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Named sub-streams of one master seed.
#[derive(Debug, Clone, Copy)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// RNG for the named stream.
    pub fn stream(&self, name: &str) -> ChaCha12Rng {
        let mut seed_bytes = [0u8; 32];
        let base = splitmix64(self.master ^ fnv1a(name));
        for (i, chunk) in seed_bytes.chunks_mut(8).enumerate() {
            chunk.copy_from_slice(&splitmix64(base.wrapping_add(i as u64)).to_le_bytes());
        }
        ChaCha12Rng::from_seed(seed_bytes)
    }

    /// RNG for a per-index stream, e.g. per-epoch shuffling (seed xor epoch).
    pub fn indexed_stream(&self, name: &str, index: u64) -> ChaCha12Rng {
        SeedStreams::new(self.master ^ index).stream(name)
    }
}
