//! Seed derivation. Every random stream in the crate is a ChaCha generator
//! keyed by a root seed plus a path of names and indices, so that changing
//! one experiment axis never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_name(name: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A position in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed(pub u64);

impl Seed {
    pub fn new(root: u64) -> Self {
        Seed(mix(root))
    }

    /// Named child stream, e.g. `"world"`, `"init"`, `"corruption"`, `"order"`.
    pub fn child(self, name: &str) -> Seed {
        Seed(mix(self.0 ^ hash_name(name)))
    }

    /// Indexed child stream (episode, step, epoch, ...).
    pub fn index(self, i: u64) -> Seed {
        Seed(mix(self.0.wrapping_add(mix(i.wrapping_add(0x5851_F42D_4C95_7F2D)))))
    }

    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
