//! Deterministic stream derivation for chunked sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Draws per chunk. Fixed so that output never depends on the thread count.
pub const CHUNK: usize = 256;

/// Independent generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finaliser applied to `seed` offset by `index`; used to give
/// each row of a sweep its own seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Split `count` into `(chunk_index, len)` pieces of at most [`CHUNK`].
pub(crate) fn chunks(count: usize) -> Vec<(usize, usize)> {
    (0..count.div_ceil(CHUNK))
        .map(|c| (c, CHUNK.min(count - c * CHUNK)))
        .collect()
}
