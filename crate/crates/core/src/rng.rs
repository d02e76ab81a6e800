//! Seeded random streams. Every stochastic routine takes one of these explicitly.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as Rng;

/// Root generator for a seed.
pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent sub-stream of `seed`, keyed by a purpose tag and an index.
///
/// Pipelines derive their sub-generators this way so that, for example, the
/// CVAE trained for skill cluster 0 sees exactly the same randomness as the
/// CVAE of a plain imitation run on the same seed.
pub fn derive(seed: u64, tag: Stream, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(((tag as u64) << 32) | (index & 0xffff_ffff));
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Cvae = 2,
    Reward = 3,
    Iql = 4,
    Eval = 5,
    Kmeans = 6,
    Init = 7,
}

/// Standard-normal draw.
pub fn normal(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}
