//! Deterministic random streams.
//!
//! Every stochastic routine takes its generator from [`stream`], keyed by a
//! master seed and a path of indices (seed, epoch, trajectory, ...). Work split
//! across any number of workers draws from the same streams, so results never
//! depend on the degree of parallelism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent generator from `seed` and a stream path.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    Rng::seed_from_u64(h)
}

/// Stream tags keep unrelated consumers of the same seed apart.
pub mod tag {
    pub const COLLECT: u64 = 1;
    pub const DYNAMICS: u64 = 2;
    pub const REWARD: u64 = 3;
    pub const DENOISER: u64 = 4;
    pub const POLICY: u64 = 5;
    pub const ROLLOUT: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const THEORY: u64 = 8;
    pub const MSE: u64 = 9;
}

#[inline]
pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
