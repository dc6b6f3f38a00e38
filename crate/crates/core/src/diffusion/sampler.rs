//! Plain classifier-free-guided sampler.
//!
//! Randomness discipline shared with the layered renderer: `x_T` is drawn
//! first, then one noise field per grid step, and only when that step has
//! `sigma > 0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::ops::{cfg_direction, reverse_step};
use crate::diffusion::schedule::Schedule;
use crate::error::Result;
use crate::grid::{Grid, Shape};
use crate::score::{ScoreEstimator, TokenSequence};

pub type SamplerRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SamplerRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn initial_noise(shape: Shape, rng: &mut SamplerRng) -> Grid {
    Grid::randn(shape, rng)
}

pub fn step_noise(sched: &Schedule, t: usize, shape: Shape, rng: &mut SamplerRng) -> Result<Grid> {
    let c = sched.coeffs_at(t)?;
    Ok(if c.sigma > 0.0 {
        Grid::randn(shape, rng)
    } else {
        Grid::zeros(shape)
    })
}

/// `gamma * s(x, t, c) + (1 - gamma) * s(x, t, ∅)`.
pub fn guided_score(
    est: &dyn ScoreEstimator,
    x: &Grid,
    t: usize,
    cond: &TokenSequence,
    gamma: f64,
    sched: &Schedule,
) -> Result<Grid> {
    let s_c = est.score(x, t, cond, sched)?;
    let s_u = est.score(x, t, &TokenSequence::null(), sched)?;
    cfg_direction(&s_c, &s_u, gamma)
}

/// Runs the full reverse chain from a given `x_T`.
pub fn sample_cfg_from(
    est: &dyn ScoreEstimator,
    cond: &TokenSequence,
    gamma: f64,
    sched: &Schedule,
    x_t: Grid,
    rng: &mut SamplerRng,
) -> Result<Grid> {
    let mut x = x_t;
    for &t in sched.timesteps() {
        let s_hat = guided_score(est, &x, t, cond, gamma, sched)?;
        let noise = step_noise(sched, t, x.shape(), rng)?;
        x = reverse_step(&x, &s_hat, t, sched, &noise)?;
    }
    Ok(x)
}

/// Draws `x_T` from `seed` and samples.
pub fn sample_cfg(
    est: &dyn ScoreEstimator,
    cond: &TokenSequence,
    gamma: f64,
    sched: &Schedule,
    seed: u64,
) -> Result<Grid> {
    let mut rng = seeded_rng(seed);
    let x_t = initial_noise(est.shape(), &mut rng);
    sample_cfg_from(est, cond, gamma, sched, x_t, &mut rng)
}
