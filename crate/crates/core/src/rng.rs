use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent, reproducible random stream `stream` of run seed `seed`.
///
/// Parallel workers each draw from their own stream, so results do not
/// depend on scheduling.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Combines a phase tag, a step index and a worker index into one stream id.
pub fn stream_id(phase: u8, step: u64, index: u64) -> u64 {
    ((phase as u64) << 56) ^ (step << 24) ^ index
}
