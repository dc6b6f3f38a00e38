use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::score::attention::AttentionMap;
use crate::score::tokens::{TokenId, TokenSequence, Vocabulary};
use crate::score::ScoreEstimator;

const WEIGHT_TOLERANCE: f64 = 1e-12;

/// Finite mixture of clean images. The perturbed marginal is a Gaussian
/// mixture, so its score is available in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateDistribution {
    templates: Vec<Grid>,
    weights: Vec<f64>,
    tags: Vec<Vec<TokenId>>,
    /// Per-pixel object support of each template.
    supports: Vec<Vec<bool>>,
    /// Tokens whose attention falls on the background instead of the object.
    background_tokens: BTreeSet<TokenId>,
}

impl TemplateDistribution {
    pub fn new(
        templates: Vec<Grid>,
        weights: Vec<f64>,
        tags: Vec<Vec<TokenId>>,
        supports: Vec<Vec<bool>>,
        background_tokens: BTreeSet<TokenId>,
    ) -> Result<Self> {
        let n = templates.len();
        if n == 0 {
            return Err(Error::Config("template distribution is empty".into()));
        }
        if weights.len() != n || tags.len() != n || supports.len() != n {
            return Err(Error::dims(
                format!("{n} weights, tags and supports"),
                format!("{}, {}, {}", weights.len(), tags.len(), supports.len()),
            ));
        }
        let shape = templates[0].shape();
        for t in &templates {
            if t.shape() != shape {
                return Err(Error::dims(shape, t.shape()));
            }
        }
        if supports.iter().any(|s| s.len() != shape.pixels()) {
            return Err(Error::dims(format!("{} support pixels", shape.pixels()), "other"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("template weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::Config(format!("template weights sum to {total}, not 1")));
        }
        Ok(Self {
            templates,
            weights,
            tags,
            supports,
            background_tokens,
        })
    }

    pub fn shape(&self) -> Shape {
        self.templates[0].shape()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[Grid] {
        &self.templates
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn tags(&self, m: usize) -> &[TokenId] {
        &self.tags[m]
    }

    pub fn support(&self, m: usize) -> &[bool] {
        &self.supports[m]
    }

    /// Indices of templates carrying every token of `cond`; all of them for `∅`.
    pub fn compatible(&self, cond: &TokenSequence) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&m| cond.tokens().iter().all(|t| self.tags[m].contains(t)))
            .filter(|&m| self.weights[m] > 0.0)
            .collect();
        if idx.is_empty() {
            return Err(Error::Condition(format!(
                "caption {:?} selects no template",
                cond.tokens()
            )));
        }
        Ok(idx)
    }

    /// Draws a template index according to the weights.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (m, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return m;
            }
        }
        self.len() - 1
    }

    /// Posterior responsibilities over `subset` at noise level `t`, computed
    /// with log-sum-exp.
    fn responsibilities(&self, x: &Grid, t: usize, subset: &[usize], sched: &Schedule) -> Result<Vec<f64>> {
        let ab = sched.alpha_bar(t);
        let (s, var) = (ab.sqrt(), 1.0 - ab);
        let logits: Vec<f64> = subset
            .iter()
            .map(|&m| {
                let u = &self.templates[m];
                let d2: f64 = x
                    .data()
                    .iter()
                    .zip(u.data())
                    .map(|(xv, uv)| {
                        let d = xv - s * uv;
                        d * d
                    })
                    .sum();
                self.weights[m].ln() - d2 / (2.0 * var)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        if !(z.is_finite() && z > 0.0) {
            return Err(Error::Condition("responsibilities are not finite".into()));
        }
        Ok(exps.into_iter().map(|e| e / z).collect())
    }
}

/// `∇_x log p_t(x | cond)` for the template mixture.
pub fn analytic_score(
    dist: &TemplateDistribution,
    x: &Grid,
    t: usize,
    cond: &TokenSequence,
    sched: &Schedule,
) -> Result<Grid> {
    if x.shape() != dist.shape() {
        return Err(Error::dims(dist.shape(), x.shape()));
    }
    if t < 1 || t > sched.steps() {
        return Err(Error::Schedule(format!("t = {t} outside [1, {}]", sched.steps())));
    }
    let subset = dist.compatible(cond)?;
    let r = dist.responsibilities(x, t, &subset, sched)?;
    let ab = sched.alpha_bar(t);
    let (s, var) = (ab.sqrt(), 1.0 - ab);
    let mut mean = vec![0.0; x.data().len()];
    for (&m, &rm) in subset.iter().zip(&r) {
        for (acc, u) in mean.iter_mut().zip(dist.templates[m].data()) {
            *acc += rm * u;
        }
    }
    let data = x
        .data()
        .iter()
        .zip(&mean)
        .map(|(xv, mu)| (s * mu - xv) / var)
        .collect();
    Grid::from_vec(x.shape(), data)
}

/// Synthetic cross-attention: each token row is the responsibility-weighted
/// average of the normalized support indicators of the compatible templates.
/// Object tokens attend to the object support, background tokens to its
/// complement. The unconditional caption yields a single uniform row.
pub fn analytic_attention(
    dist: &TemplateDistribution,
    x: &Grid,
    t: usize,
    cond: &TokenSequence,
    sched: &Schedule,
) -> Result<AttentionMap> {
    let shape = dist.shape();
    if x.shape() != shape {
        return Err(Error::dims(shape, x.shape()));
    }
    if cond.is_null() {
        return Ok(AttentionMap::uniform(1, shape.height, shape.width));
    }
    let subset = dist.compatible(cond)?;
    let r = dist.responsibilities(x, t, &subset, sched)?;
    let cols = shape.pixels();
    let mut values = vec![0.0; cond.len() * cols];
    for (i, token) in cond.tokens().iter().enumerate() {
        let on_background = dist.background_tokens.contains(token);
        let row = &mut values[i * cols..(i + 1) * cols];
        for (&m, &rm) in subset.iter().zip(&r) {
            let supp = &dist.supports[m];
            let count = supp.iter().filter(|&&b| b != on_background).count();
            if count == 0 {
                row.iter_mut().for_each(|v| *v += rm / cols as f64);
            } else {
                let w = rm / count as f64;
                for (v, &b) in row.iter_mut().zip(supp) {
                    if b != on_background {
                        *v += w;
                    }
                }
            }
        }
    }
    AttentionMap::from_rows(cond.len(), shape.height, shape.width, values)
}

/// Exact estimator over a [`TemplateDistribution`].
#[derive(Debug, Clone)]
pub struct AnalyticEstimator {
    dist: TemplateDistribution,
    vocab: Vocabulary,
}

impl AnalyticEstimator {
    pub fn new(dist: TemplateDistribution, vocab: Vocabulary) -> Self {
        Self { dist, vocab }
    }

    pub fn distribution(&self) -> &TemplateDistribution {
        &self.dist
    }
}

impl ScoreEstimator for AnalyticEstimator {
    fn shape(&self) -> Shape {
        self.dist.shape()
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn score(&self, x: &Grid, t: usize, cond: &TokenSequence, sched: &Schedule) -> Result<Grid> {
        analytic_score(&self.dist, x, t, cond, sched)
    }

    fn attention_capable(&self) -> bool {
        true
    }

    fn attention_blocks(
        &self,
        x: &Grid,
        t: usize,
        cond: &TokenSequence,
        sched: &Schedule,
    ) -> Result<Vec<AttentionMap>> {
        Ok(vec![analytic_attention(&self.dist, x, t, cond, sched)?])
    }
}

/// Desk-scale image domain: a plain background with one square coloured blob
/// in one cell of a regular grid, plus an empty scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDomain {
    pub height: usize,
    pub width: usize,
    pub cells_y: usize,
    pub cells_x: usize,
    pub background: [f64; 3],
    pub colors: Vec<(String, [f64; 3])>,
    pub scene_token: String,
    pub empty_token: String,
    pub include_empty: bool,
}

impl Default for OracleDomain {
    fn default() -> Self {
        Self {
            height: 12,
            width: 12,
            cells_y: 3,
            cells_x: 3,
            background: [0.1, 0.1, 0.1],
            colors: vec![
                ("red".into(), [0.9, 0.15, 0.15]),
                ("green".into(), [0.15, 0.8, 0.25]),
                ("blue".into(), [0.2, 0.3, 0.9]),
                ("yellow".into(), [0.9, 0.85, 0.15]),
            ],
            scene_token: "plain".into(),
            empty_token: "empty".into(),
            include_empty: true,
        }
    }
}

impl OracleDomain {
    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width, 3)
    }

    pub fn cell_count(&self) -> usize {
        self.cells_y * self.cells_x
    }

    pub fn cell_token(cell: usize) -> String {
        format!("cell{cell}")
    }

    /// Pixel box `(x_min, y_min, x_max, y_max)` of a cell, half-open.
    pub fn cell_box(&self, cell: usize) -> (usize, usize, usize, usize) {
        let (cy, cx) = (cell / self.cells_x, cell % self.cells_x);
        let (bh, bw) = (self.height / self.cells_y, self.width / self.cells_x);
        (cx * bw, cy * bh, (cx + 1) * bw, (cy + 1) * bh)
    }

    pub fn color(&self, name: &str) -> Option<[f64; 3]> {
        self.colors.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    /// Background plus every blob colour, background first.
    pub fn palette(&self) -> Vec<[f64; 3]> {
        std::iter::once(self.background)
            .chain(self.colors.iter().map(|(_, c)| *c))
            .collect()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut names: Vec<String> = self.colors.iter().map(|(n, _)| n.clone()).collect();
        names.push(self.scene_token.clone());
        names.push(self.empty_token.clone());
        names.extend((0..self.cell_count()).map(Self::cell_token));
        Vocabulary::new(names).expect("domain vocabulary is well formed")
    }

    /// Clean image with a blob of `color` filling `cell`.
    pub fn render_blob(&self, color: [f64; 3], cell: usize) -> Grid {
        let (x0, y0, x1, y1) = self.cell_box(cell);
        Grid::from_fn(self.shape(), |j, k, l| {
            if (y0..y1).contains(&j) && (x0..x1).contains(&k) {
                color[l]
            } else {
                self.background[l]
            }
        })
    }

    pub fn render_empty(&self) -> Grid {
        Grid::from_fn(self.shape(), |_, _, l| self.background[l])
    }

    pub fn distribution(&self) -> Result<TemplateDistribution> {
        if !self.height.is_multiple_of(self.cells_y) || !self.width.is_multiple_of(self.cells_x) {
            return Err(Error::Config("image size must be divisible by the cell grid".into()));
        }
        let vocab = self.vocabulary();
        let id = |n: &str| vocab.id(n).expect("token in domain vocabulary");
        let scene = id(&self.scene_token);
        let mut templates = Vec::new();
        let mut tags = Vec::new();
        let mut supports = Vec::new();
        for (name, color) in &self.colors {
            for cell in 0..self.cell_count() {
                templates.push(self.render_blob(*color, cell));
                tags.push(vec![id(name), id(&Self::cell_token(cell)), scene]);
                let (x0, y0, x1, y1) = self.cell_box(cell);
                supports.push(
                    (0..self.height)
                        .flat_map(|j| (0..self.width).map(move |k| (j, k)))
                        .map(|(j, k)| (y0..y1).contains(&j) && (x0..x1).contains(&k))
                        .collect(),
                );
            }
        }
        if self.include_empty {
            templates.push(self.render_empty());
            tags.push(vec![id(&self.empty_token), scene]);
            supports.push(vec![false; self.height * self.width]);
        }
        let n = templates.len();
        let background_tokens = [scene, id(&self.empty_token)].into_iter().collect();
        TemplateDistribution::new(templates, vec![1.0 / n as f64; n], tags, supports, background_tokens)
    }

    pub fn estimator(&self) -> Result<AnalyticEstimator> {
        Ok(AnalyticEstimator::new(self.distribution()?, self.vocabulary()))
    }
}
