//! Seed derivation and the deterministic random stream used everywhere.
//!
//! Per-group seeds are a cryptographic hash of (master seed, group index),
//! so any group can be re-run in isolation and reproduce its record exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// The portable seeded stream owned by a single group run.
pub type GroupRng = ChaCha12Rng;

/// Derives the 32-byte seed for group `index` under `master_seed`.
pub fn group_seed(master_seed: u64, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(b"group");
    hasher.update(index.to_le_bytes());
    hasher.finalize().into()
}

pub fn rng_for_group(master_seed: u64, index: u64) -> GroupRng {
    ChaCha12Rng::from_seed(group_seed(master_seed, index))
}

pub fn seed_hex(seed: &[u8; 32]) -> String {
    seed.iter().map(|b| format!("{b:02x}")).collect()
}
