//! Named random streams split from one root seed.
//!
//! Each component draws from its own stream so reseeding one (say, the
//! environment) leaves the others untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream names used across the pipeline.
pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const SAMPLING: &str = "sampling";
pub const ENVIRONMENT: &str = "environment";

/// FNV-1a, stable across builds and platforms.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Root seed from which named child streams are derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Seed of the child stream `name`.
    pub fn seed(&self, name: &str) -> u64 {
        mix(self.root ^ fnv1a(name.as_bytes()))
    }

    /// Subtree for `name`, for further splitting.
    pub fn child(&self, name: &str) -> SeedTree {
        SeedTree::new(self.seed(name))
    }

    pub fn stream(&self, name: &str) -> Rng {
        Rng::seed_from_u64(self.seed(name))
    }

    /// Stream `name` indexed by `i`, e.g. one per dialog.
    pub fn indexed(&self, name: &str, i: u64) -> Rng {
        Rng::seed_from_u64(mix(self.seed(name) ^ mix(i)))
    }
}
