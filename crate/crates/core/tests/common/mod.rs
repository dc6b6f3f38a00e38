//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use lrdiff::diffusion::{cfg_direction, reverse_step, Schedule};
use lrdiff::guidance::{MaskSource, RegionMask};
use lrdiff::layered::PreparedLayer;
use lrdiff::score::{ScoreEstimator, TemplateDistribution, TokenSequence};
use lrdiff::Grid;
use rand::Rng;

/// `log p_t(x | c)` of the template mixture, evaluated directly.
pub fn log_density(dist: &TemplateDistribution, x: &Grid, ab: f64, cond: &TokenSequence) -> f64 {
    let var = 1.0 - ab;
    let n = x.data().len() as f64;
    let terms: Vec<f64> = (0..dist.len())
        .filter(|&m| cond.tokens().iter().all(|t| dist.tags(m).contains(t)))
        .map(|m| {
            let u = &dist.templates()[m];
            let sq: f64 = x
                .data()
                .iter()
                .zip(u.data())
                .map(|(a, b)| (a - ab.sqrt() * b).powi(2))
                .sum();
            dist.weights()[m].ln() - sq / (2.0 * var) - 0.5 * n * (2.0 * std::f64::consts::PI * var).ln()
        })
        .collect();
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + terms.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(x: &Grid, h: f64, f: impl Fn(&Grid) -> f64) -> Vec<f64> {
    (0..x.data().len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

/// Top-K by full sort of `(value, index)`; all entries tying with the K-th
/// value are kept.
pub fn brute_top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let kth = pairs[k - 1].0;
    let mut set: Vec<usize> = pairs.iter().filter(|p| p.0 >= kth).map(|p| p.1).collect();
    set.sort_unstable();
    set
}

pub fn random_box_mask<R: Rng>(h: usize, w: usize, rng: &mut R) -> RegionMask {
    let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
    let (y1, x1) = (rng.random_range(y0 + 1..=h), rng.random_range(x0 + 1..=w));
    let bits = (0..h * w)
        .map(|p| (y0..y1).contains(&(p / w)) && (x0..x1).contains(&(p % w)))
        .collect();
    RegionMask::new(h, w, bits, MaskSource::Box).unwrap()
}

pub fn random_bits_mask<R: Rng>(h: usize, w: usize, density: f64, rng: &mut R) -> RegionMask {
    let bits = (0..h * w).map(|_| rng.random::<f64>() < density).collect();
    RegionMask::new(h, w, bits, MaskSource::InstanceMask).unwrap()
}

/// One layer's full guided step, as if it were rendered on its own.
pub fn per_layer_step(
    x: &Grid,
    layer: &PreparedLayer,
    gamma: f64,
    est: &dyn ScoreEstimator,
    t: usize,
    sched: &Schedule,
    noise: &Grid,
) -> Grid {
    let input = match &layer.xi {
        Some(xi) => x.add(xi).unwrap(),
        None => x.clone(),
    };
    let s_c = est.score(&input, t, &layer.caption, sched).unwrap();
    let s_u = est.score(x, t, &TokenSequence::null(), sched).unwrap();
    reverse_step(x, &cfg_direction(&s_c, &s_u, gamma).unwrap(), t, sched, noise).unwrap()
}

/// Per pixel minimizer of `sum_i || M_i (x - x_i) ||^2`, by brute force.
pub fn brute_masked_average(fields: &[Grid], masks: &[&RegionMask]) -> Grid {
    let shape = fields[0].shape();
    Grid::from_fn(shape, |j, k, l| {
        let (mut num, mut den) = (0.0, 0.0);
        for (f, m) in fields.iter().zip(masks) {
            if m.get(j, k) {
                num += f.get(j, k, l);
                den += 1.0;
            }
        }
        num / den
    })
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
