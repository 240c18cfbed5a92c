//! Seeded random number generation.
//!
//! Everything stochastic in the crate flows through [`seeded`] or
//! [`derived`] so that a run is a pure function of its seeds. ChaCha8 is
//! used because its output is specified independently of the platform and
//! the stream feature gives cheap per-sample derived generators.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for a top-level seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator derived from (seed, stream), e.g. one per sample.
pub fn derived(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
