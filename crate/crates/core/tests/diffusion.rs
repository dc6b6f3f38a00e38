use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lrdiff::diffusion::{
    cfg_direction, ddim_invert_step, ddim_step, reverse_step, sample_cfg, BetaSchedule, Schedule, ScheduleConfig,
};
use lrdiff::score::{AnalyticEstimator, TemplateDistribution, TokenSequence, Vocabulary};
use lrdiff::{Grid, Shape};

fn grid_from(seed: u64, shape: Shape) -> Grid {
    Grid::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn single_template(u: Grid) -> AnalyticEstimator {
    let n = u.shape().pixels();
    let dist =
        TemplateDistribution::new(vec![u], vec![1.0], vec![vec![0]], vec![vec![true; n]], BTreeSet::new()).unwrap();
    AnalyticEstimator::new(dist, Vocabulary::new(["thing"]).unwrap())
}

proptest! {
    #[test]
    fn cfg_endpoints_and_affinity(seed in any::<u64>(), gamma in -5.0f64..15.0) {
        let shape = Shape::new(3, 2, 2);
        let c = grid_from(seed, shape);
        let u = grid_from(seed ^ 1, shape);
        prop_assert_eq!(cfg_direction(&c, &u, 1.0).unwrap(), c.clone());
        prop_assert_eq!(cfg_direction(&c, &u, 0.0).unwrap(), u.clone());
        let g = cfg_direction(&c, &u, gamma).unwrap();
        for ((gv, cv), uv) in g.data().iter().zip(c.data()).zip(u.data()) {
            prop_assert!((gv - (uv + gamma * (cv - uv))).abs() <= 1e-12 * (1.0 + gv.abs()));
        }
    }

    #[test]
    fn ddim_step_and_inversion_are_inverse(seed in any::<u64>(), pos in 0usize..49, stride in 1usize..4) {
        let mut cfg = ScheduleConfig::new(50, BetaSchedule::Linear, 15);
        cfg.stride = stride;
        let sched = Schedule::new(&cfg).unwrap();
        let grid = sched.timesteps();
        let i = pos % grid.len();
        let (hi, lo) = (grid[i], grid.get(i + 1).copied().unwrap_or(0));
        let x = grid_from(seed, Shape::new(2, 2, 3));
        let eps = grid_from(seed.wrapping_add(7), Shape::new(2, 2, 3));
        let down = ddim_step(&x, &eps, hi, lo, &sched).unwrap();
        let back = ddim_invert_step(&down, &eps, lo, hi, &sched).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() <= 1e-10);
    }

    #[test]
    fn ancestral_step_is_ddpm_posterior(seed in any::<u64>(), t in 1usize..=50) {
        let cfg = ScheduleConfig { deterministic: false, ..ScheduleConfig::new(50, BetaSchedule::Linear, 15) };
        let sched = Schedule::new(&cfg).unwrap();
        let shape = Shape::new(2, 3, 1);
        let x = grid_from(seed, shape);
        let s = grid_from(seed ^ 3, shape);
        let z = grid_from(seed ^ 5, shape);
        let got = reverse_step(&x, &s, t, &sched, &z).unwrap();
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
        let beta = sched.betas()[t - 1];
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        for i in 0..x.data().len() {
            let (xv, sv, zv) = (x.data()[i], s.data()[i], z.data()[i]);
            let x0 = (xv + (1.0 - ab) * sv) / ab.sqrt();
            let mean = ab_prev.sqrt() * beta / (1.0 - ab) * x0
                + (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab) * xv;
            let want = mean + var.sqrt() * zv;
            prop_assert!((got.data()[i] - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn alpha_bar_is_a_decreasing_product(steps in 1usize..300, scaled in any::<bool>()) {
        let kind = if scaled { BetaSchedule::ScaledLinear } else { BetaSchedule::Linear };
        let sched = Schedule::new(&ScheduleConfig::new(steps, kind, 1)).unwrap();
        prop_assert_eq!(sched.alpha_bar(0), 1.0);
        let mut acc = 1.0;
        for t in 1..=steps {
            acc *= 1.0 - sched.betas()[t - 1];
            prop_assert!((sched.alpha_bar(t) - acc).abs() <= 1e-14);
            prop_assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
            prop_assert!(sched.alpha_bar(t) > 0.0);
        }
    }
}

#[test]
fn ddim_with_exact_single_template_score_recovers_it() {
    let shape = Shape::new(3, 3, 3);
    let u = Grid::from_fn(shape, |j, k, l| 0.1 * (j + 2 * k + 3 * l) as f64 - 0.5);
    let est = single_template(u.clone());
    let cond = TokenSequence::new(vec![0]).unwrap();
    for stride in [1, 5] {
        let mut cfg = ScheduleConfig::new(50, BetaSchedule::Linear, 15);
        cfg.stride = stride;
        let sched = Schedule::new(&cfg).unwrap();
        for seed in 0..3 {
            let x = sample_cfg(&est, &cond, 7.5, &sched, seed).unwrap();
            assert!(x.max_abs_diff(&u).unwrap() < 1e-9, "stride {stride} seed {seed}");
        }
    }
}

#[test]
fn sampler_is_seed_deterministic() {
    let est = single_template(Grid::filled(Shape::new(2, 2, 3), 0.3));
    let cond = TokenSequence::new(vec![0]).unwrap();
    let cfg = ScheduleConfig { deterministic: false, ..ScheduleConfig::new(20, BetaSchedule::Linear, 5) };
    let sched = Schedule::new(&cfg).unwrap();
    let a = sample_cfg(&est, &cond, 3.0, &sched, 11).unwrap();
    let b = sample_cfg(&est, &cond, 3.0, &sched, 11).unwrap();
    let c = sample_cfg(&est, &cond, 3.0, &sched, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn ddim_guards_reject_off_grid_moves() {
    let mut cfg = ScheduleConfig::new(50, BetaSchedule::Linear, 15);
    cfg.stride = 5;
    let sched = Schedule::new(&cfg).unwrap();
    let x = Grid::zeros(Shape::new(1, 1, 1));
    assert!(ddim_step(&x, &x, 50, 44, &sched).is_err());
    assert!(ddim_step(&x, &x, 50, 40, &sched).is_err());
    assert!(ddim_step(&x, &x, 45, 50, &sched).is_err());
    assert!(ddim_step(&x, &x, 50, 45, &sched).is_ok());
}
