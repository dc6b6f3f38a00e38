//! Noise schedules, forward perturbation, reverse and DDIM stepping, and
//! classifier-free guidance.

mod ops;
mod sampler;
mod schedule;

pub use ops::{
    cfg_direction, ddim_invert_step, ddim_step, eps_to_score, forward_diffuse, reverse_step,
    score_to_eps,
};
pub use sampler::{guided_score, initial_noise, sample_cfg, sample_cfg_from, seeded_rng, step_noise, SamplerRng};
pub use schedule::{build_schedule, BetaSchedule, ReverseCoeffs, Schedule, ScheduleConfig};
