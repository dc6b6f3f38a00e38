use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference chain length the default beta ranges are quoted against.
const REFERENCE_STEPS: f64 = 1000.0;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BetaSchedule {
    #[default]
    Linear,
    ScaledLinear,
}

impl BetaSchedule {
    /// Beta range over a 1000-step reference chain.
    fn reference_range(self) -> (f64, f64) {
        match self {
            BetaSchedule::Linear => (1e-4, 0.02),
            BetaSchedule::ScaledLinear => (0.00085, 0.012),
        }
    }
}

impl std::str::FromStr for BetaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(BetaSchedule::Linear),
            "scaled-linear" | "scaled_linear" => Ok(BetaSchedule::ScaledLinear),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Chain length `T`.
    pub steps: usize,
    pub kind: BetaSchedule,
    /// Explicit beta endpoints. When absent the reference range is rescaled
    /// by `1000 / T` so that short chains still end close to pure noise.
    pub beta_range: Option<(f64, f64)>,
    /// Spacing of the sampling grid in chain steps.
    pub stride: usize,
    /// Layered/general boundary: grid steps with `t > t0` are layered.
    pub t0: usize,
    /// `true` selects the DDIM (eta = 0) update, `false` ancestral DDPM.
    pub deterministic: bool,
    /// Reject DDIM moves between non-adjacent grid points.
    pub strict_stride: bool,
}

impl ScheduleConfig {
    pub fn new(steps: usize, kind: BetaSchedule, t0: usize) -> Self {
        Self {
            steps,
            kind,
            beta_range: None,
            stride: 1,
            t0,
            deterministic: true,
            strict_stride: true,
        }
    }
}

/// Per grid step coefficients of `x_prev = alpha * x_t + beta * score + sigma * noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReverseCoeffs {
    pub t: usize,
    pub t_prev: usize,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    steps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    grid: Vec<usize>,
    coeffs: Vec<ReverseCoeffs>,
    t0: usize,
    deterministic: bool,
    strict_stride: bool,
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let step = (end - start) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}

pub fn build_schedule(steps: usize, kind: BetaSchedule, t0: usize) -> Result<Schedule> {
    Schedule::new(&ScheduleConfig::new(steps, kind, t0))
}

impl Schedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.steps == 0 {
            return Err(Error::Config("step count T must be at least 1".into()));
        }
        let (start, end) = match cfg.beta_range {
            Some(r) => r,
            None => {
                let (s, e) = cfg.kind.reference_range();
                let scale = REFERENCE_STEPS / cfg.steps as f64;
                ((s * scale).min(MAX_BETA), (e * scale).min(MAX_BETA))
            }
        };
        let betas: Vec<f64> = match cfg.kind {
            BetaSchedule::Linear => linspace(start, end, cfg.steps),
            BetaSchedule::ScaledLinear => linspace(start.sqrt(), end.sqrt(), cfg.steps)
                .into_iter()
                .map(|b| b * b)
                .collect(),
        }
        .into_iter()
        .map(|b| b.min(MAX_BETA))
        .collect();
        Self::from_betas(betas, cfg.stride, cfg.t0, cfg.deterministic, cfg.strict_stride)
    }

    pub fn from_betas(
        betas: Vec<f64>,
        stride: usize,
        t0: usize,
        deterministic: bool,
        strict_stride: bool,
    ) -> Result<Self> {
        let steps = betas.len();
        if steps == 0 {
            return Err(Error::Config("step count T must be at least 1".into()));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && **b < 1.0))
        {
            return Err(Error::Config(format!("beta_{} = {b} outside (0, 1)", i + 1)));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if t0 < 1 || t0 > steps {
            return Err(Error::Config(format!("t0 = {t0} outside [1, {steps}]")));
        }

        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }

        let grid: Vec<usize> = (1..=steps).rev().step_by(stride).collect();
        let mut sched = Schedule {
            steps,
            betas,
            alpha_bars,
            grid,
            coeffs: Vec::new(),
            t0,
            deterministic,
            strict_stride,
        };
        sched.coeffs = sched
            .grid
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let t_prev = sched.grid.get(i + 1).copied().unwrap_or(0);
                sched.coeffs_between(t, t_prev)
            })
            .collect();
        if let Some(c) = sched
            .coeffs
            .iter()
            .find(|c| !(c.alpha.is_finite() && c.beta.is_finite() && c.sigma.is_finite()))
        {
            return Err(Error::Config(format!(
                "non-finite reverse coefficients at t = {}",
                c.t
            )));
        }
        Ok(sched)
    }

    fn coeffs_between(&self, t: usize, t_prev: usize) -> ReverseCoeffs {
        let ab_t = self.alpha_bar(t);
        let ab_p = self.alpha_bar(t_prev);
        if self.deterministic {
            let alpha = (ab_p / ab_t).sqrt();
            let beta = (1.0 - ab_t).sqrt() * (alpha * (1.0 - ab_t).sqrt() - (1.0 - ab_p).sqrt());
            ReverseCoeffs {
                t,
                t_prev,
                alpha,
                beta,
                sigma: 0.0,
            }
        } else {
            let a = ab_t / ab_p;
            let b = 1.0 - a;
            ReverseCoeffs {
                t,
                t_prev,
                alpha: 1.0 / a.sqrt(),
                beta: b / a.sqrt(),
                sigma: ((1.0 - ab_p) / (1.0 - ab_t) * b).sqrt(),
            }
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative products, index `t - 1` holds `alpha_bar_t`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `alpha_bar_t` with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Sampling timesteps, strictly decreasing from `T`.
    pub fn timesteps(&self) -> &[usize] {
        &self.grid
    }

    pub fn coefficients(&self) -> &[ReverseCoeffs] {
        &self.coeffs
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn strict_stride(&self) -> bool {
        self.strict_stride
    }

    /// Same chain and grid with a different layered/general boundary.
    pub fn with_t0(&self, t0: usize) -> Result<Self> {
        if t0 < 1 || t0 > self.steps {
            return Err(Error::Config(format!(
                "t0 = {t0} outside [1, {}]",
                self.steps
            )));
        }
        let mut s = self.clone();
        s.t0 = t0;
        Ok(s)
    }

    /// `true` for timesteps handled by the layered section.
    pub fn is_layered(&self, t: usize) -> bool {
        t > self.t0
    }

    pub fn layered_len(&self) -> usize {
        self.grid.iter().filter(|&&t| self.is_layered(t)).count()
    }

    pub fn coeffs_at(&self, t: usize) -> Result<ReverseCoeffs> {
        self.grid_position(t)
            .map(|i| self.coeffs[i])
            .ok_or_else(|| Error::Schedule(format!("t = {t} is not on the sampling grid")))
    }

    pub fn grid_position(&self, t: usize) -> Option<usize> {
        self.grid.iter().position(|&g| g == t)
    }

    /// Grid successor of `t` (the next, smaller timestep), `0` after the last.
    pub fn prev_timestep(&self, t: usize) -> Result<usize> {
        self.coeffs_at(t).map(|c| c.t_prev)
    }

    pub(crate) fn on_grid_or_zero(&self, t: usize) -> bool {
        t == 0 || self.grid_position(t).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifty_step_default() {
        let s = build_schedule(50, BetaSchedule::Linear, 15).unwrap();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.timesteps().len(), 50);
        assert_eq!(s.t0(), 15);
        assert_eq!(s.timesteps()[0], 50);
        assert_eq!(*s.timesteps().last().unwrap(), 1);
        assert!(s.alpha_bar(50) < 1e-3);
        assert_eq!(s.layered_len(), 35);
    }

    #[test]
    fn single_step_chain() {
        let s = build_schedule(1, BetaSchedule::Linear, 1).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - s.betas()[0]);
        let s = build_schedule(1, BetaSchedule::ScaledLinear, 1).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - s.betas()[0]);
    }

    #[test]
    fn explicit_range_matches_product_loop() {
        let mut cfg = ScheduleConfig::new(10, BetaSchedule::Linear, 3);
        cfg.beta_range = Some((1e-4, 0.02));
        let s = Schedule::new(&cfg).unwrap();
        let mut prod = 1.0;
        for i in 0..10 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 9.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(10) - prod).abs() < 1e-15);
        assert!((s.alpha_bar(10) - 0.9043).abs() < 1e-3);
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(
            build_schedule(0, BetaSchedule::Linear, 1),
            Err(Error::Config(_))
        ));
        assert!(build_schedule(10, BetaSchedule::Linear, 0).is_err());
        assert!(build_schedule(10, BetaSchedule::Linear, 11).is_err());
        let mut cfg = ScheduleConfig::new(10, BetaSchedule::Linear, 3);
        cfg.beta_range = Some((0.0, 0.5));
        assert!(Schedule::new(&cfg).is_err());
    }

    #[test]
    fn strided_grid() {
        let mut cfg = ScheduleConfig::new(100, BetaSchedule::Linear, 10);
        cfg.stride = 20;
        let s = Schedule::new(&cfg).unwrap();
        assert_eq!(s.timesteps(), &[100, 80, 60, 40, 20]);
        assert_eq!(s.prev_timestep(20).unwrap(), 0);
        assert!(s.coeffs_at(50).is_err());
    }

    #[test]
    fn deterministic_mode_has_no_noise() {
        let s = build_schedule(50, BetaSchedule::ScaledLinear, 15).unwrap();
        assert!(s.coefficients().iter().all(|c| c.sigma == 0.0));
        let mut cfg = ScheduleConfig::new(50, BetaSchedule::Linear, 15);
        cfg.deterministic = false;
        let s = Schedule::new(&cfg).unwrap();
        assert!(s.coefficients()[..49].iter().all(|c| c.sigma > 0.0));
        // last step to clean data has zero posterior variance
        assert_eq!(s.coefficients()[49].sigma, 0.0);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        for kind in [BetaSchedule::Linear, BetaSchedule::ScaledLinear] {
            for steps in [1, 2, 7, 10, 50, 1000] {
                let s = build_schedule(steps, kind, 1).unwrap();
                let mut prev = 1.0;
                for t in 1..=steps {
                    assert!(s.alpha_bar(t) < prev);
                    prev = s.alpha_bar(t);
                }
            }
        }
    }
}
