//! Deterministic, splittable random number streams.
//!
//! Every stochastic routine in this crate draws from a ChaCha stream
//! addressed by `(seed, stream)`.  Work split across replicas, widths, or
//! chunks assigns each unit its own stream index, so results are
//! reproducible bit-for-bit for a fixed seed regardless of how the units
//! are scheduled across threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used everywhere in this crate.
pub type Stream = ChaCha8Rng;

/// Returns the ChaCha stream addressed by `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs a two-level work address (e.g. width index, chunk index) into a
/// single stream index.  The high 32 bits hold `major`, the low 32 `minor`;
/// callers must keep `minor < 2^32`.
pub fn substream(major: u64, minor: u64) -> u64 {
    debug_assert!(minor < (1u64 << 32), "minor stream index overflow");
    (major << 32) | minor
}
