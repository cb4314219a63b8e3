//! Seeded random source shared by every stochastic component.

use rand::{Rng as _, SeedableRng};

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named sub-task.
pub fn fork(seed: u64, stream: u64) -> Rng {
    let mut r = seeded(seed);
    r.set_stream(stream);
    r
}

/// Standard normal sample (Box-Muller).
pub fn normal(rng: &mut Rng) -> f32 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random::<f64>();
    (libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)) as f32
}

pub fn uniform(rng: &mut Rng, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.random::<f32>()
}
