//! Seed derivation. Every stochastic component draws from a ChaCha stream
//! keyed by `(seed, stream)`, so parallel workers never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs a small tuple of indices into one stream id.
pub fn stream_id(parts: &[u64]) -> u64 {
    parts.iter().fold(0u64, |acc, &p| acc.wrapping_mul(1_000_003).wrapping_add(p + 1))
}
