use crate::diffusion::schedule::Schedule;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Closed-form marginal `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(x0: &Grid, t: usize, eps: &Grid, sched: &Schedule) -> Result<Grid> {
    if t < 1 || t > sched.steps() {
        return Err(Error::Schedule(format!(
            "t = {t} outside [1, {}]",
            sched.steps()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Classifier-free guidance `gamma * s_cond + (1 - gamma) * s_uncond`.
pub fn cfg_direction(s_cond: &Grid, s_uncond: &Grid, gamma: f64) -> Result<Grid> {
    s_cond.zip_map(s_uncond, |c, u| gamma * c + (1.0 - gamma) * u)
}

/// One reverse step `alpha x_t + beta s_hat + sigma noise` on the sampling grid.
pub fn reverse_step(
    x_t: &Grid,
    s_hat: &Grid,
    t: usize,
    sched: &Schedule,
    noise: &Grid,
) -> Result<Grid> {
    let c = sched.coeffs_at(t)?;
    x_t.ensure_shape(s_hat)?;
    x_t.ensure_shape(noise)?;
    let data = x_t
        .data()
        .iter()
        .zip(s_hat.data())
        .zip(noise.data())
        .map(|((&x, &s), &n)| c.alpha * x + c.beta * s + c.sigma * n)
        .collect();
    Grid::from_vec(x_t.shape(), data)
}

/// Convert a score to the equivalent noise prediction at `t`.
pub fn score_to_eps(score: &Grid, t: usize, sched: &Schedule) -> Grid {
    let k = -(1.0 - sched.alpha_bar(t)).sqrt();
    score.scale(k)
}

pub fn eps_to_score(eps: &Grid, t: usize, sched: &Schedule) -> Grid {
    let k = -1.0 / (1.0 - sched.alpha_bar(t)).sqrt();
    eps.scale(k)
}

fn ddim_move(x: &Grid, eps: &Grid, from: usize, to: usize, sched: &Schedule) -> Result<Grid> {
    x.ensure_shape(eps)?;
    let (ab_f, ab_t) = (sched.alpha_bar(from), sched.alpha_bar(to));
    let (sf, nf) = (ab_f.sqrt(), (1.0 - ab_f).sqrt());
    let (st, nt) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    x.zip_map(eps, |x, e| st * ((x - nf * e) / sf) + nt * e)
}

fn check_pair(t_hi: usize, t_lo: usize, sched: &Schedule) -> Result<()> {
    if !sched.on_grid_or_zero(t_hi) || !sched.on_grid_or_zero(t_lo) {
        return Err(Error::Schedule(format!(
            "DDIM move {t_hi} <-> {t_lo} leaves the sampling grid"
        )));
    }
    if sched.strict_stride() && sched.prev_timestep(t_hi)? != t_lo {
        return Err(Error::Schedule(format!(
            "{t_hi} and {t_lo} are not adjacent grid steps"
        )));
    }
    Ok(())
}

/// Deterministic DDIM update from `t_from` down to `t_to`.
pub fn ddim_step(
    x_t: &Grid,
    eps_hat: &Grid,
    t_from: usize,
    t_to: usize,
    sched: &Schedule,
) -> Result<Grid> {
    if t_from == t_to {
        x_t.ensure_shape(eps_hat)?;
        return Ok(x_t.clone());
    }
    if t_from < t_to {
        return Err(Error::Schedule(format!(
            "ddim_step needs t_from > t_to, got {t_from} -> {t_to}"
        )));
    }
    check_pair(t_from, t_to, sched)?;
    ddim_move(x_t, eps_hat, t_from, t_to, sched)
}

/// Inverse of [`ddim_step`]: moves from `t_from` up to `t_to` with the same noise estimate.
pub fn ddim_invert_step(
    x_t: &Grid,
    eps_hat: &Grid,
    t_from: usize,
    t_to: usize,
    sched: &Schedule,
) -> Result<Grid> {
    if t_from == t_to {
        x_t.ensure_shape(eps_hat)?;
        return Ok(x_t.clone());
    }
    if t_from > t_to {
        return Err(Error::Schedule(format!(
            "ddim_invert_step needs t_from < t_to, got {t_from} -> {t_to}"
        )));
    }
    check_pair(t_to, t_from, sched)?;
    ddim_move(x_t, eps_hat, t_from, t_to, sched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{build_schedule, BetaSchedule, ScheduleConfig};
    use crate::grid::Shape;
    use rand::SeedableRng;

    fn shape() -> Shape {
        Shape::new(3, 4, 2)
    }

    #[test]
    fn forward_with_unit_alpha_bar_is_identity() {
        // ab_t = 1 is only reached at t = 0; emulate with a vanishing beta.
        let s = Schedule::from_betas(vec![1e-300, 0.5], 1, 1, true, true).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x0 = Grid::randn(shape(), &mut rng);
        let eps = Grid::randn(shape(), &mut rng);
        assert_eq!(forward_diffuse(&x0, 1, &eps, &s).unwrap(), x0);
    }

    #[test]
    fn forward_of_zero_field_is_scaled_noise() {
        let s = build_schedule(20, BetaSchedule::Linear, 5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let eps = Grid::randn(shape(), &mut rng);
        let out = forward_diffuse(&Grid::zeros(shape()), 7, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(7)).sqrt();
        assert_eq!(out, eps.map(|e| k * e));
        assert!(matches!(
            forward_diffuse(&Grid::zeros(Shape::new(1, 1, 1)), 7, &eps, &s),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cfg_limits() {
        let c = Grid::filled(shape(), 1.0);
        let u = Grid::zeros(shape());
        assert_eq!(cfg_direction(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_direction(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_direction(&c, &u, 7.5).unwrap(), Grid::filled(shape(), 7.5));
    }

    #[test]
    fn reverse_step_with_zero_score_scales() {
        let s = build_schedule(10, BetaSchedule::Linear, 3).unwrap();
        let x = Grid::filled(shape(), 2.0);
        let out = reverse_step(&x, &Grid::zeros(shape()), 4, &s, &Grid::zeros(shape())).unwrap();
        let a = s.coeffs_at(4).unwrap().alpha;
        assert_eq!(out, Grid::filled(shape(), 2.0 * a));
        assert!(matches!(
            reverse_step(&x, &x, 11, &s, &x),
            Err(Error::Schedule(_))
        ));
    }

    #[test]
    fn reverse_step_at_t_max_by_hand() {
        let s = build_schedule(10, BetaSchedule::Linear, 3).unwrap();
        // independent recomputation of the DDIM coefficients at t = T
        let ab_t: f64 = s.betas().iter().map(|b| 1.0 - b).product();
        let ab_p: f64 = s.betas()[..9].iter().map(|b| 1.0 - b).product();
        let alpha = (ab_p / ab_t).sqrt();
        let beta = (ab_p / ab_t).sqrt() * (1.0 - ab_t) - ((1.0 - ab_t) * (1.0 - ab_p)).sqrt();
        let out = reverse_step(
            &Grid::filled(shape(), 0.7),
            &Grid::filled(shape(), -1.3),
            10,
            &s,
            &Grid::zeros(shape()),
        )
        .unwrap();
        let want = alpha * 0.7 + beta * -1.3;
        for v in out.data() {
            assert!((v - want).abs() < 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn ancestral_step_matches_ddpm_posterior_mean() {
        let mut cfg = ScheduleConfig::new(10, BetaSchedule::Linear, 3);
        cfg.deterministic = false;
        let s = Schedule::new(&cfg).unwrap();
        let t = 6;
        let beta_t = s.betas()[t - 1];
        let ab = s.alpha_bar(t);
        let x = 0.4;
        let eps = 0.9;
        let score = -eps / (1.0 - ab).sqrt();
        // mu = (x - beta / sqrt(1 - ab) * eps) / sqrt(1 - beta)
        let mu = (x - beta_t / (1.0 - ab).sqrt() * eps) / (1.0 - beta_t).sqrt();
        let out = reverse_step(
            &Grid::filled(shape(), x),
            &Grid::filled(shape(), score),
            t,
            &s,
            &Grid::zeros(shape()),
        )
        .unwrap();
        assert!((out.data()[0] - mu).abs() < 1e-12);
        let var = (1.0 - s.alpha_bar(t - 1)) / (1.0 - ab) * beta_t;
        assert!((s.coeffs_at(t).unwrap().sigma - var.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn deterministic_reverse_step_is_ddim_step() {
        let s = build_schedule(50, BetaSchedule::Linear, 15).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Grid::randn(shape(), &mut rng);
        let eps = Grid::randn(shape(), &mut rng);
        for &t in s.timesteps() {
            let score = eps_to_score(&eps, t, &s);
            let a = reverse_step(&x, &score, t, &s, &Grid::zeros(shape())).unwrap();
            let b = ddim_step(&x, &eps, t, s.prev_timestep(t).unwrap(), &s).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
        }
    }

    #[test]
    fn ddim_guards() {
        let s = build_schedule(10, BetaSchedule::Linear, 3).unwrap();
        let x = Grid::filled(shape(), 0.3);
        assert_eq!(ddim_step(&x, &x, 5, 5, &s).unwrap(), x);
        assert!(ddim_step(&x, &x, 4, 5, &s).is_err());
        assert!(matches!(
            ddim_step(&x, &x, 7, 4, &s),
            Err(Error::Schedule(_))
        ));
        let mut cfg = ScheduleConfig::new(10, BetaSchedule::Linear, 3);
        cfg.strict_stride = false;
        let loose = Schedule::new(&cfg).unwrap();
        assert!(ddim_step(&x, &x, 7, 4, &loose).is_ok());
    }

    #[test]
    fn ddim_round_trip() {
        let s = build_schedule(50, BetaSchedule::Linear, 15).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Grid::randn(shape(), &mut rng);
        let e = Grid::randn(shape(), &mut rng);
        for &t in s.timesteps() {
            let p = s.prev_timestep(t).unwrap();
            let down = ddim_step(&x, &e, t, p, &s).unwrap();
            let back = ddim_invert_step(&down, &e, p, t, &s).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "t={t}: {a} vs {b}");
            }
        }
    }
}
