//! Seeding helpers: one global seed, per-item streams derived by XOR.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent per-item seed: `global XOR index`. Order-independent, so items
/// can be generated in any order or in parallel.
pub fn derive_seed(global: u64, index: u64) -> u64 {
    global ^ index
}
