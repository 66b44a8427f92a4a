//! One root seed, split into independent named streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A node in a tree of seeds; children are derived by label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree(u64);

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self(splitmix64(seed))
    }

    pub fn child(&self, label: &str) -> Self {
        // FNV-1a over the label, mixed with the parent state.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Self(splitmix64(self.0 ^ h))
    }

    pub fn index(&self, i: u64) -> Self {
        Self(splitmix64(self.0 ^ splitmix64(i.wrapping_add(1))))
    }

    pub fn seed(&self) -> u64 {
        self.0
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
