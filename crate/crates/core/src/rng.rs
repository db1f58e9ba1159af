//! Seeded random streams. Every per-item stream is derived from the global
//! seed and a stable key so results do not depend on processing order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xxhash_rust::xxh3::xxh3_64_with_seed;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, key: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(xxh3_64_with_seed(key.as_bytes(), seed))
}
