//! Named, seeded random substreams.
//!
//! Every source of randomness in the crate draws from a substream derived
//! from one master seed and a path-like name ("data/split", "init/frontend",
//! "train/shuffle/epoch.3"). Substream derivation hashes the master seed
//! together with the name, so streams are independent of declaration order
//! and stable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Root of the substream tree for one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    master: u64,
}

impl SeedStream {
    pub fn new(master: u64) -> Self {
        SeedStream { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Deterministic RNG for the named substream.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.master.to_le_bytes());
        hasher.update([0u8]);
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Child seed for handing a whole subtree to another component.
    pub fn child_seed(&self, name: &str) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.master.to_le_bytes());
        hasher.update([1u8]);
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}
