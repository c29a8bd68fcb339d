//! Named random substreams derived from one master seed.
//!
//! Each stream is seeded with SHA-256 of the master seed, the stream name and
//! an index, so adding or reordering consumers never shifts another
//! consumer's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    master: u64,
}

impl SeedStream {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn rng(&self, name: &str) -> Rng {
        self.indexed(name, 0)
    }

    pub fn indexed(&self, name: &str, index: u64) -> Rng {
        let mut h = Sha256::new();
        h.update(self.master.to_le_bytes());
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update(index.to_le_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        Rng::from_seed(seed)
    }

    /// A child stream whose names live under `name`.
    pub fn child(&self, name: &str, index: u64) -> SeedStream {
        use rand::Rng as _;
        SeedStream::new(self.indexed(name, index).random())
    }
}
