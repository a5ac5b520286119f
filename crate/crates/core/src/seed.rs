//! Deterministic seed derivation.
//!
//! Every experiment owns one [`SeedTree`]. Parallel lanes and sub-tasks derive
//! child trees by index, so results never depend on scheduling order.

use rand::SeedableRng;

/// Generator used by every stochastic operation in the crate.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// A splittable seed. Children are derived with a SplitMix64 finalizer, which
/// decorrelates neighbouring indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree {
    seed: u64,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn child(&self, index: u64) -> Self {
        Self {
            seed: mix(self.seed ^ mix(index.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    /// Shorthand for `self.child(a).child(b)`.
    pub fn child2(&self, a: u64, b: u64) -> Self {
        self.child(a).child(b)
    }

    pub fn rng(&self) -> SimRng {
        SimRng::seed_from_u64(self.seed)
    }
}
