//! Deterministic random streams.
//!
//! Every random decision is drawn from a ChaCha8 stream keyed by the run seed.
//! The key is `ChaCha8Rng::seed_from_u64(seed)`; the 64-bit stream id selects
//! the consumer:
//!
//! | consumer                          | stream id                          |
//! |-----------------------------------|------------------------------------|
//! | evolution, generation `g`, slot `i` | `(g << 24) | i` (requires `i < 2^24`) |
//! | anything else                     | caller-chosen via [`stream`]       |
//!
//! Because each (generation, member) pair owns its stream, synchronous and
//! sequential update semantics consume identical draws.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Largest population the per-member stream layout can address.
pub const MAX_MEMBERS: usize = 1 << 24;

pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

pub fn member_stream(seed: u64, generation: u64, member: usize) -> ChaCha8Rng {
    debug_assert!(member < MAX_MEMBERS);
    stream(seed, (generation << 24) | member as u64)
}
