//! Scene editing: deterministic inversion of a source image, then a layered
//! render of the edited scene from the recovered latent.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ddim_invert_step, sample_cfg_from, score_to_eps, seeded_rng, Schedule,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::guidance::RegionMask;
use crate::layered::{render_from, SceneSpec};
use crate::score::{ScoreEstimator, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    /// Recovered initial latent.
    pub latent: Grid,
    /// Timesteps visited, ascending, ending at the latent's timestep.
    pub timesteps: Vec<usize>,
    pub caption: TokenSequence,
}

/// Inverts `x0` up to and including grid timestep `t_stop` (0 leaves `x0`
/// unchanged). The estimator is evaluated at the current latent with the
/// next timestep, which is the step the sampler undoes.
pub fn ddim_invert_until(
    x0: &Grid,
    est: &dyn ScoreEstimator,
    caption: &TokenSequence,
    sched: &Schedule,
    t_stop: usize,
) -> Result<InversionResult> {
    if !sched.is_deterministic() {
        return Err(Error::Config(
            "inversion needs the deterministic sampler (sigma = 0)".into(),
        ));
    }
    if x0.shape() != est.shape() {
        return Err(Error::dims(est.shape(), x0.shape()));
    }
    if t_stop != 0 && sched.grid_position(t_stop).is_none() {
        return Err(Error::Schedule(format!("t = {t_stop} is not on the sampling grid")));
    }
    let mut x = x0.clone();
    let mut t_cur = 0;
    let mut visited = Vec::new();
    for &t_next in sched.timesteps().iter().rev().take_while(|&&t| t <= t_stop) {
        let score = est.score(&x, t_next, caption, sched)?;
        let eps = score_to_eps(&score, t_next, sched);
        x = ddim_invert_step(&x, &eps, t_cur, t_next, sched)?;
        visited.push(t_next);
        t_cur = t_next;
    }
    Ok(InversionResult {
        latent: x,
        timesteps: visited,
        caption: caption.clone(),
    })
}

/// Full inversion to the first sampling timestep.
pub fn ddim_invert(
    x0: &Grid,
    est: &dyn ScoreEstimator,
    caption: &TokenSequence,
    sched: &Schedule,
) -> Result<InversionResult> {
    let top = sched.timesteps().first().copied().unwrap_or(0);
    ddim_invert_until(x0, est, caption, sched, top)
}

/// Samples back from an inverted latent with guidance scale 1 and the
/// inversion caption; returns the reconstruction and its MSE against `x0`.
pub fn reconstruct(
    x0: &Grid,
    inversion: &InversionResult,
    est: &dyn ScoreEstimator,
    sched: &Schedule,
) -> Result<(Grid, f64)> {
    let mut rng = seeded_rng(0);
    let out = sample_cfg_from(est, &inversion.caption, 1.0, sched, inversion.latent.clone(), &mut rng)?;
    let mse = out.mse(x0)?;
    Ok((out, mse))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub output: Grid,
    pub inversion: InversionResult,
}

/// Inverts `source` under `source_caption`, then renders `scene` from the
/// recovered latent. The scene's schedule must be deterministic.
pub fn edit_scene(
    source: &Grid,
    source_caption: &TokenSequence,
    scene: &SceneSpec,
    est: &dyn ScoreEstimator,
) -> Result<EditResult> {
    if source.shape() != scene.resolution {
        return Err(Error::dims(scene.resolution, source.shape()));
    }
    scene.validate()?;
    let sched = scene.build_schedule()?;
    let inversion = ddim_invert(source, est, source_caption, &sched)?;
    let mut rng = seeded_rng(scene.seed);
    let output = render_from(scene, est, &sched, inversion.latent.clone(), &mut rng)?;
    Ok(EditResult { output, inversion })
}

/// Mean squared difference over pixels outside every mask; `None` when the
/// masks cover the whole image.
pub fn outside_mask_mse(a: &Grid, b: &Grid, masks: &[&RegionMask]) -> Result<Option<f64>> {
    a.ensure_shape(b)?;
    let shape = a.shape();
    for m in masks {
        m.check_resolution(shape)?;
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for j in 0..shape.height {
        for k in 0..shape.width {
            if masks.iter().any(|m| m.get(j, k)) {
                continue;
            }
            for (x, y) in a.pixel(j, k).iter().zip(b.pixel(j, k)) {
                total += (x - y) * (x - y);
            }
            n += shape.channels;
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}
