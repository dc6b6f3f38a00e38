//! Layered rendering.
//!
//! Above `t0` every layer evaluates its own guided score at `x_t + xi_i` with
//! its layer caption; the scores are fused with coverage-normalized mask
//! weights and combined with the unconditional score under the guidance scale.
//! At and below `t0` the chain continues as ordinary guided sampling on the
//! global caption.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    cfg_direction, guided_score, initial_noise, reverse_step, seeded_rng, step_noise, SamplerRng, Schedule,
    ScheduleConfig,
};
use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::guidance::{
    build_dynamic_random, build_xi, compute_dynamic_delta, GuidanceMode, RegionMask, VisionGuidance,
};
use crate::score::{extract_attention, AttentionMap, ScoreEstimator, TokenSequence};

/// How a layer's guidance direction is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub mode: GuidanceMode,
    /// Fixed direction. Required for `constant`; for `suppress-only` a missing
    /// delta falls back to the top-K mean vector.
    pub delta: Option<Vec<f64>>,
    pub lambda: f64,
    pub k: usize,
}

impl GuidanceSpec {
    pub fn null() -> Self {
        Self {
            mode: GuidanceMode::Null,
            delta: None,
            lambda: 1.0,
            k: 20,
        }
    }

    pub fn constant(delta: Vec<f64>) -> Self {
        Self {
            mode: GuidanceMode::Constant,
            delta: Some(delta),
            ..Self::null()
        }
    }

    pub fn suppress_only(delta: Vec<f64>) -> Self {
        Self {
            mode: GuidanceMode::SuppressOnly,
            delta: Some(delta),
            ..Self::null()
        }
    }

    pub fn dynamic(mode: GuidanceMode, lambda: f64, k: usize) -> Self {
        Self {
            mode,
            delta: None,
            lambda,
            k,
        }
    }

    fn needs_attention(&self) -> bool {
        match self.mode {
            GuidanceMode::DynamicMean | GuidanceMode::DynamicRandom => true,
            GuidanceMode::SuppressOnly => self.delta.is_none(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub caption: TokenSequence,
    pub mask: RegionMask,
    pub guidance: GuidanceSpec,
    pub is_background: bool,
}

impl Layer {
    pub fn object(caption: TokenSequence, mask: RegionMask, guidance: GuidanceSpec) -> Self {
        Self {
            caption,
            mask,
            guidance,
            is_background: false,
        }
    }

    /// Final layer: all-ones mask, no vision guidance.
    pub fn background(caption: TokenSequence, height: usize, width: usize) -> Self {
        Self {
            caption,
            mask: RegionMask::all_ones(height, width),
            guidance: GuidanceSpec::null(),
            is_background: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub global_caption: TokenSequence,
    /// Object layers followed by exactly one background layer.
    pub layers: Vec<Layer>,
    pub gamma: f64,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub resolution: Shape,
}

impl SceneSpec {
    /// Background-only scene whose single layer carries the global caption.
    pub fn background_only(global_caption: TokenSequence, resolution: Shape, schedule: ScheduleConfig, gamma: f64, seed: u64) -> Self {
        Self {
            layers: vec![Layer::background(global_caption.clone(), resolution.height, resolution.width)],
            global_caption,
            gamma,
            schedule,
            seed,
            resolution,
        }
    }

    /// Inserts an object layer in front of the background layer.
    pub fn push_object(&mut self, layer: Layer) {
        let at = self.layers.len().saturating_sub(1);
        self.layers.insert(at, layer);
    }

    pub fn object_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| !l.is_background)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("scene has no layers".into()));
        }
        let backgrounds = self.layers.iter().filter(|l| l.is_background).count();
        if backgrounds != 1 || !self.layers.last().is_some_and(|l| l.is_background) {
            return Err(Error::Config(
                "scene needs exactly one background layer, placed last".into(),
            ));
        }
        let bg = self.layers.last().expect("non-empty");
        if bg.guidance.mode != GuidanceMode::Null || bg.mask.count() != bg.mask.bits().len() {
            return Err(Error::Config(
                "background layer must have null guidance and an all-ones mask".into(),
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.mask.check_resolution(self.resolution)?;
            if l.caption.is_null() {
                return Err(Error::Config(format!("layer {i} has an empty caption")));
            }
            if !l.is_background && l.guidance.mode != GuidanceMode::Null {
                if let Some(d) = &l.guidance.delta {
                    if d.len() != self.resolution.channels {
                        return Err(Error::dims(
                            format!("delta of length {}", self.resolution.channels),
                            d.len(),
                        ));
                    }
                }
                if l.guidance.mode == GuidanceMode::Constant && l.guidance.delta.is_none() {
                    return Err(Error::Config(format!("layer {i}: constant guidance needs delta")));
                }
                if l.guidance.needs_attention() {
                    if l.guidance.k == 0 || l.guidance.k > self.resolution.pixels() {
                        return Err(Error::Config(format!("layer {i}: K = {} out of range", l.guidance.k)));
                    }
                    if !(l.guidance.lambda >= 0.0 && l.guidance.lambda.is_finite()) {
                        return Err(Error::Config(format!("layer {i}: lambda must be >= 0")));
                    }
                }
            }
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!("guidance scale {} must be >= 0", self.gamma)));
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<Schedule> {
        Schedule::new(&self.schedule)
    }
}

/// Layer with its guidance field materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedLayer {
    pub caption: TokenSequence,
    pub mask: RegionMask,
    pub guidance: Option<VisionGuidance>,
    pub xi: Option<Grid>,
}

fn layer_rng(seed: u64, layer: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(layer as u64 + 1)))
}

/// Resolves every layer's guidance against the initial latent `x_T`.
/// Dynamic directions use the global caption's attention at `t = T`.
pub fn prepare_layers(
    scene: &SceneSpec,
    est: &dyn ScoreEstimator,
    x_t: &Grid,
    sched: &Schedule,
) -> Result<Vec<PreparedLayer>> {
    let mut attention: Option<AttentionMap> = None;
    let mut out = Vec::with_capacity(scene.layers.len());
    for (i, layer) in scene.layers.iter().enumerate() {
        let spec = &layer.guidance;
        if layer.is_background || spec.mode == GuidanceMode::Null {
            out.push(PreparedLayer {
                caption: layer.caption.clone(),
                mask: layer.mask.clone(),
                guidance: None,
                xi: None,
            });
            continue;
        }
        let dynamic = if spec.needs_attention() {
            if attention.is_none() {
                if scene.global_caption.is_null() {
                    return Err(Error::Guidance("dynamic guidance needs a global caption".into()));
                }
                attention = Some(extract_attention(est, x_t, &scene.global_caption, sched)?);
            }
            let token = layer.caption.first().expect("validated non-empty caption");
            let row = scene.global_caption.position(token).ok_or_else(|| {
                Error::Guidance(format!(
                    "layer {i}: token {token} does not occur in the global caption"
                ))
            })?;
            Some(compute_dynamic_delta(
                attention.as_ref().expect("set above"),
                row,
                x_t,
                spec.k,
                spec.lambda,
            )?)
        } else {
            None
        };
        let guidance = match spec.mode {
            GuidanceMode::Constant => {
                VisionGuidance::constant(spec.delta.clone().expect("validated"), layer.mask.clone())
            }
            GuidanceMode::SuppressOnly => {
                let delta = match (&spec.delta, &dynamic) {
                    (Some(d), _) => d.clone(),
                    (None, Some((d, _))) => d.clone(),
                    (None, None) => unreachable!(),
                };
                VisionGuidance::suppress_only(delta, layer.mask.clone())
            }
            GuidanceMode::DynamicMean => {
                let (delta, _) = dynamic.expect("computed");
                VisionGuidance::dynamic_mean(delta, layer.mask.clone(), spec.lambda, spec.k)
            }
            GuidanceMode::DynamicRandom => {
                let (_, set) = dynamic.expect("computed");
                let mut g = build_dynamic_random(&set, x_t, spec.lambda, &layer.mask, &mut layer_rng(scene.seed, i))?;
                g.k = spec.k;
                g
            }
            GuidanceMode::Null => unreachable!(),
        };
        let xi = build_xi(&guidance)?;
        x_t.ensure_shape(&xi)?;
        out.push(PreparedLayer {
            caption: layer.caption.clone(),
            mask: layer.mask.clone(),
            guidance: Some(guidance),
            xi: Some(xi),
        });
    }
    Ok(out)
}

/// Number of masks covering each pixel.
pub fn coverage(masks: &[&RegionMask]) -> Result<Vec<u32>> {
    let first = masks.first().ok_or_else(|| Error::Fusion("no layers to fuse".into()))?;
    let n = first.bits().len();
    let mut cov = vec![0u32; n];
    for m in masks {
        if m.height() != first.height() || m.width() != first.width() {
            return Err(Error::dims(
                format!("{}x{} mask", first.height(), first.width()),
                format!("{}x{}", m.height(), m.width()),
            ));
        }
        for (c, &b) in cov.iter_mut().zip(m.bits()) {
            *c += b as u32;
        }
    }
    if let Some(p) = cov.iter().position(|&c| c == 0) {
        return Err(Error::Fusion(format!(
            "pixel ({}, {}) is covered by no layer",
            p / first.width(),
            p % first.width()
        )));
    }
    Ok(cov)
}

/// Rational fusion weights `(M_i, coverage)` of every layer at pixel `p`.
pub fn fusion_weights(masks: &[&RegionMask], pixel: usize) -> Result<Vec<(u32, u32)>> {
    let cov = coverage(masks)?;
    Ok(masks.iter().map(|m| (m.bits()[pixel] as u32, cov[pixel])).collect())
}

/// `sum_i M_i / (sum_j M_j) * field_i`, copying the field directly where a
/// single layer covers the pixel.
fn masked_average(fields: &[&Grid], masks: &[&RegionMask]) -> Result<Grid> {
    if fields.len() != masks.len() {
        return Err(Error::dims(format!("{} fields", masks.len()), fields.len()));
    }
    let cov = coverage(masks)?;
    let shape = fields[0].shape();
    for (f, m) in fields.iter().zip(masks) {
        fields[0].ensure_shape(f)?;
        m.check_resolution(shape)?;
    }
    let d = shape.channels;
    let mut out = Grid::zeros(shape);
    for (p, &c) in cov.iter().enumerate() {
        let (j, k) = (p / shape.width, p % shape.width);
        let dst = out.pixel_mut(j, k);
        if c == 1 {
            let i = masks.iter().position(|m| m.bits()[p]).expect("coverage 1");
            dst.copy_from_slice(fields[i].pixel(j, k));
            continue;
        }
        let inv = 1.0 / c as f64;
        for (f, m) in fields.iter().zip(masks) {
            if m.bits()[p] {
                let src = f.pixel(j, k);
                for l in 0..d {
                    dst[l] += inv * src[l];
                }
            }
        }
    }
    Ok(out)
}

/// Coverage-normalized mask-weighted sum of per-layer scores.
pub fn fuse_layer_scores(masks: &[&RegionMask], scores: &[Grid]) -> Result<Grid> {
    let refs: Vec<&Grid> = scores.iter().collect();
    masked_average(&refs, masks)
}

/// Minimizer of `sum_i || M_i ⊗ (x - x_i) ||^2`: the per-pixel average of the
/// layers covering that pixel.
pub fn compose_masked_solution(per_layer_x: &[Grid], masks: &[&RegionMask]) -> Result<Grid> {
    let refs: Vec<&Grid> = per_layer_x.iter().collect();
    masked_average(&refs, masks)
}

fn layer_input(x: &Grid, layer: &PreparedLayer) -> Result<Grid> {
    match &layer.xi {
        Some(xi) => x.add(xi),
        None => Ok(x.clone()),
    }
}

/// Per-layer conditional scores `s(x_t + xi_i, t, y_i)`.
pub fn layer_scores(
    x_t: &Grid,
    layers: &[PreparedLayer],
    est: &dyn ScoreEstimator,
    t: usize,
    sched: &Schedule,
) -> Result<Vec<Grid>> {
    layers
        .iter()
        .map(|l| est.score(&layer_input(x_t, l)?, t, &l.caption, sched))
        .collect()
}

/// One first-section step:
/// `x_{t-1} = alpha x_t + beta [gamma Phi_t + (1 - gamma) s(x_t, t, ∅)] + sigma eps`.
pub fn layered_step(
    x_t: &Grid,
    layers: &[PreparedLayer],
    gamma: f64,
    est: &dyn ScoreEstimator,
    t: usize,
    sched: &Schedule,
    noise: &Grid,
) -> Result<Grid> {
    if !sched.is_layered(t) {
        return Err(Error::Schedule(format!(
            "t = {t} is in the general section (t0 = {})",
            sched.t0()
        )));
    }
    let scores = layer_scores(x_t, layers, est, t, sched)?;
    let masks: Vec<&RegionMask> = layers.iter().map(|l| &l.mask).collect();
    let phi = fuse_layer_scores(&masks, &scores)?;
    let s_u = est.score(x_t, t, &TokenSequence::null(), sched)?;
    let s_hat = cfg_direction(&phi, &s_u, gamma)?;
    reverse_step(x_t, &s_hat, t, sched, noise)
}

/// Runs both sections from a given `x_T`, continuing the caller's noise stream.
pub fn render_from(
    scene: &SceneSpec,
    est: &dyn ScoreEstimator,
    sched: &Schedule,
    x_t: Grid,
    rng: &mut SamplerRng,
) -> Result<Grid> {
    scene.validate()?;
    if x_t.shape() != scene.resolution || est.shape() != scene.resolution {
        return Err(Error::dims(scene.resolution, format!("latent {} / estimator {}", x_t.shape(), est.shape())));
    }
    let layers = prepare_layers(scene, est, &x_t, sched)?;
    let mut x = x_t;
    for &t in sched.timesteps() {
        x = if sched.is_layered(t) {
            let noise = step_noise(sched, t, x.shape(), rng)?;
            layered_step(&x, &layers, scene.gamma, est, t, sched, &noise)?
        } else {
            let s_hat = guided_score(est, &x, t, &scene.global_caption, scene.gamma, sched)?;
            let noise = step_noise(sched, t, x.shape(), rng)?;
            reverse_step(&x, &s_hat, t, sched, &noise)?
        };
    }
    Ok(x)
}

/// Full render from the scene's seed.
pub fn render(scene: &SceneSpec, est: &dyn ScoreEstimator) -> Result<Grid> {
    let sched = scene.build_schedule()?;
    let mut rng = seeded_rng(scene.seed);
    let x_t = initial_noise(scene.resolution, &mut rng);
    render_from(scene, est, &sched, x_t, &mut rng)
}
