//! Named random streams derived from one root seed.
//!
//! A stream is identified by a purpose label plus an index. Adding a new
//! consumer with a fresh label never shifts the draws seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    root: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn derive_seed(&self, label: &str, index: u64) -> u64 {
        splitmix64(splitmix64(self.root ^ fnv1a(label)) ^ splitmix64(index.wrapping_add(1)))
    }

    pub fn rng(&self, label: &str, index: u64) -> StreamRng {
        StreamRng::seed_from_u64(self.derive_seed(label, index))
    }

    /// A child splitter rooted at a derived seed.
    pub fn child(&self, label: &str, index: u64) -> SeedStream {
        SeedStream::new(self.derive_seed(label, index))
    }
}
