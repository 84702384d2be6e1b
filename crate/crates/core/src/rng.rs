//! Seeded randomness.
//!
//! Every stochastic routine takes a generator by parameter; nothing reads
//! the wall clock. Parallel work derives one child generator per unit of
//! work from a master seed, so results do not depend on scheduling.

use rand::SeedableRng;

/// The one generator type used throughout the crate. ChaCha keeps the
/// stream stable across platforms and library versions.
pub type SeedRng = rand_chacha::ChaCha8Rng;

/// Creates the master generator for a run.
pub fn seed_rng(seed: u64) -> SeedRng {
    SeedRng::seed_from_u64(seed)
}

/// Derives an independent generator for stream `stream` of a master seed.
///
/// The mapping is a fixed bijective hash, so distinct (seed, stream) pairs
/// give unrelated streams and the same pair always gives the same stream.
pub fn child_rng(master: u64, stream: u64) -> SeedRng {
    SeedRng::seed_from_u64(derive_seed(master, stream))
}

/// The seed that [`child_rng`] would use; handy when a child needs to fan
/// out further streams of its own.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    mix64(master ^ mix64(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)))
}

/// splitmix64 finalizer.
fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
