use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream for `(seed, stream, index)`, so that work items can be
/// generated in any order (or in parallel) with identical results.
pub(crate) fn stream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}
