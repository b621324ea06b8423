//! Seeded RNG construction.
//!
//! Every stochastic component derives its stream from a `(seed, stream)` pair so
//! that parallel and serial execution draw identical values per record.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG for a named purpose under a master seed.
///
/// `stream` separates independent consumers (records of a dataset, components
/// of a model) without correlating their draws.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard-normal draw as `f64`; callers convert to their element type so the
/// draw sequence is identical for f32 and f64 models.
pub fn normal_f64<R: rand::Rng>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}
