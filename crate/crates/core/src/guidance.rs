//! Vision guidance: an additive field built from a direction `delta` and a
//! binary region mask, pushing an object's denoising towards the region and
//! away from everything outside it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::score::AttentionMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    Box,
    InstanceMask,
    AllOnes,
    Complement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    source: MaskSource,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>, source: MaskSource) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dims(format!("{height}x{width} mask"), bits.len()));
        }
        Ok(Self {
            height,
            width,
            bits,
            source,
        })
    }

    pub fn all_ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
            source: MaskSource::AllOnes,
        }
    }

    /// Binarizes intensities in `[0, 1]` at `threshold`.
    pub fn from_intensities(height: usize, width: usize, values: &[f64], threshold: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            values.iter().map(|&v| v >= threshold).collect(),
            MaskSource::InstanceMask,
        )
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
            source: MaskSource::Complement,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> bool {
        self.bits[j * self.width + k]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn check_resolution(&self, shape: Shape) -> Result<()> {
        if self.height != shape.height || self.width != shape.width {
            return Err(Error::dims(
                format!("{}x{} mask", shape.height, shape.width),
                format!("{}x{}", self.height, self.width),
            ));
        }
        Ok(())
    }
}

/// Pixel box, half-open: `x_min <= k < x_max`, `y_min <= j < y_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn contains(&self, y: f64, x: f64) -> bool {
        y >= self.y_min as f64 && y < self.y_max as f64 && x >= self.x_min as f64 && x < self.x_max as f64
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Layout(format!("degenerate box {self:?}")));
        }
        if self.x_max > width || self.y_max > height {
            return Err(Error::Layout(format!(
                "box {self:?} exceeds the {height}x{width} canvas"
            )));
        }
        Ok(())
    }
}

pub fn rasterize_box(b: &BoundingBox, height: usize, width: usize) -> Result<RegionMask> {
    b.validate(height, width)?;
    let bits = (0..height)
        .flat_map(|j| (0..width).map(move |k| (j, k)))
        .map(|(j, k)| (b.y_min..b.y_max).contains(&j) && (b.x_min..b.x_max).contains(&k))
        .collect();
    RegionMask::new(height, width, bits, MaskSource::Box)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    Constant,
    DynamicMean,
    DynamicRandom,
    SuppressOnly,
    Null,
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "constant" => GuidanceMode::Constant,
            "dynamic-mean" => GuidanceMode::DynamicMean,
            "dynamic-random" => GuidanceMode::DynamicRandom,
            "suppress-only" => GuidanceMode::SuppressOnly,
            "null" | "none" => GuidanceMode::Null,
            other => return Err(Error::Config(format!("unknown guidance mode `{other}`"))),
        })
    }
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GuidanceMode::Constant => "constant",
            GuidanceMode::DynamicMean => "dynamic-mean",
            GuidanceMode::DynamicRandom => "dynamic-random",
            GuidanceMode::SuppressOnly => "suppress-only",
            GuidanceMode::Null => "null",
        })
    }
}

/// Resolved guidance for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionGuidance {
    pub mode: GuidanceMode,
    pub delta: Option<Vec<f64>>,
    pub mask: RegionMask,
    pub lambda: f64,
    pub k: usize,
    /// Row-major per-pixel vectors inside the mask (dynamic-random only).
    pub position_vectors: Option<Vec<Vec<f64>>>,
}

impl VisionGuidance {
    pub fn constant(delta: Vec<f64>, mask: RegionMask) -> Self {
        Self {
            mode: GuidanceMode::Constant,
            delta: Some(delta),
            mask,
            lambda: 1.0,
            k: 1,
            position_vectors: None,
        }
    }

    pub fn suppress_only(delta: Vec<f64>, mask: RegionMask) -> Self {
        Self {
            mode: GuidanceMode::SuppressOnly,
            ..Self::constant(delta, mask)
        }
    }

    pub fn dynamic_mean(delta: Vec<f64>, mask: RegionMask, lambda: f64, k: usize) -> Self {
        Self {
            mode: GuidanceMode::DynamicMean,
            delta: Some(delta),
            mask,
            lambda,
            k,
            position_vectors: None,
        }
    }

    pub fn null(mask: RegionMask) -> Self {
        Self {
            mode: GuidanceMode::Null,
            delta: None,
            mask,
            lambda: 0.0,
            k: 1,
            position_vectors: None,
        }
    }

    pub fn is_null(&self) -> bool {
        self.mode == GuidanceMode::Null
    }
}

/// The guidance field `xi` of shape `h × w × D`.
///
/// * constant / dynamic-mean: `xi = delta * (2M - 1)`
/// * suppress-only: `xi = -delta * (1 - M)`, exactly zero on the mask
/// * dynamic-random: per-pixel vectors on the mask, `-delta` elsewhere
pub fn build_xi(g: &VisionGuidance) -> Result<Grid> {
    if g.mode == GuidanceMode::Null {
        return Err(Error::Guidance(
            "null guidance has no field; skip the addition instead".into(),
        ));
    }
    let delta = g
        .delta
        .as_ref()
        .ok_or_else(|| Error::Guidance(format!("{} guidance without delta", g.mode)))?;
    if delta.is_empty() || delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Guidance("delta must be a non-empty finite vector".into()));
    }
    if g.mode != GuidanceMode::Constant && g.mode != GuidanceMode::SuppressOnly && g.k == 0 {
        return Err(Error::Guidance("dynamic guidance needs K >= 1".into()));
    }
    let m = &g.mask;
    let shape = Shape::new(m.height, m.width, delta.len());
    match g.mode {
        GuidanceMode::Constant | GuidanceMode::DynamicMean => Ok(Grid::from_fn(shape, |j, k, l| {
            let sign = if m.get(j, k) { 1.0 } else { -1.0 };
            delta[l] * sign
        })),
        GuidanceMode::SuppressOnly => Ok(Grid::from_fn(shape, |j, k, l| {
            if m.get(j, k) {
                0.0
            } else {
                -delta[l]
            }
        })),
        GuidanceMode::DynamicRandom => {
            let vecs = g
                .position_vectors
                .as_ref()
                .ok_or_else(|| Error::Guidance("dynamic-random guidance without position vectors".into()))?;
            if vecs.len() != m.count() || vecs.iter().any(|v| v.len() != delta.len()) {
                return Err(Error::Guidance(format!(
                    "expected {} position vectors of length {}",
                    m.count(),
                    delta.len()
                )));
            }
            let mut xi = Grid::zeros(shape);
            let mut next = vecs.iter();
            for j in 0..m.height {
                for k in 0..m.width {
                    let px = xi.pixel_mut(j, k);
                    if m.get(j, k) {
                        px.copy_from_slice(next.next().expect("count checked"));
                    } else {
                        for (p, d) in px.iter_mut().zip(delta) {
                            *p = -d;
                        }
                    }
                }
            }
            Ok(xi)
        }
        GuidanceMode::Null => unreachable!(),
    }
}

/// Top-K attended positions of one token and the scaled mean of `x_T` there.
///
/// `S = { p : A[token, p] >= K-th largest entry }`, so ties at the threshold
/// are all kept; `delta = lambda / |S| * sum_{p in S} x_T(p)`.
pub fn compute_dynamic_delta(
    attention: &AttentionMap,
    token_index: usize,
    x_t: &Grid,
    k: usize,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<(usize, usize)>)> {
    let shape = x_t.shape();
    if attention.height() != shape.height || attention.width() != shape.width {
        return Err(Error::dims(
            format!("{}x{} attention", shape.height, shape.width),
            format!("{}x{}", attention.height(), attention.width()),
        ));
    }
    if token_index >= attention.rows() {
        return Err(Error::Config(format!(
            "token index {token_index} outside {} attention rows",
            attention.rows()
        )));
    }
    let cols = attention.cols();
    if k == 0 || k > cols {
        return Err(Error::Config(format!("K = {k} outside [1, {cols}]")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda = {lambda} must be finite and >= 0")));
    }
    let row = attention.row(token_index);
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[k - 1];
    let set: Vec<(usize, usize)> = (0..cols)
        .filter(|&p| row[p] >= threshold)
        .map(|p| (p / shape.width, p % shape.width))
        .collect();
    let mut delta = vec![0.0; shape.channels];
    for &(j, kk) in &set {
        for (d, v) in delta.iter_mut().zip(x_t.pixel(j, kk)) {
            *d += v;
        }
    }
    let scale = lambda / set.len() as f64;
    delta.iter_mut().for_each(|d| *d *= scale);
    Ok((delta, set))
}

/// Random-vectors variant: every pixel inside `mask` carries `lambda` times
/// the `x_T` vector of an independently drawn member of `set`; outside the
/// mask the field is the negated mean vector.
pub fn build_dynamic_random<R: Rng + ?Sized>(
    set: &[(usize, usize)],
    x_t: &Grid,
    lambda: f64,
    mask: &RegionMask,
    rng: &mut R,
) -> Result<VisionGuidance> {
    if set.is_empty() {
        return Err(Error::Guidance("empty attention set".into()));
    }
    mask.check_resolution(x_t.shape())?;
    let d = x_t.shape().channels;
    let mut mean = vec![0.0; d];
    for &(j, k) in set {
        for (m, v) in mean.iter_mut().zip(x_t.pixel(j, k)) {
            *m += v;
        }
    }
    let scale = lambda / set.len() as f64;
    mean.iter_mut().for_each(|m| *m *= scale);
    let vectors = (0..mask.count())
        .map(|_| {
            let (j, k) = set[rng.random_range(0..set.len())];
            x_t.pixel(j, k).iter().map(|v| lambda * v).collect()
        })
        .collect();
    Ok(VisionGuidance {
        mode: GuidanceMode::DynamicRandom,
        delta: Some(mean),
        mask: mask.clone(),
        lambda,
        k: set.len(),
        position_vectors: Some(vectors),
    })
}

/// Constant guidance directions for common colours, at 0.3 opacity.
pub fn named_delta(name: &str) -> Option<[f64; 3]> {
    const A: f64 = 0.3;
    Some(match name {
        "white" => [A, A, A],
        "black" => [0.0, 0.0, 0.0],
        "red" => [A, 0.0, 0.0],
        "green" => [0.0, A, 0.0],
        "blue" => [0.0, 0.0, A],
        "yellow" => [A, A, 0.0],
        "brown" => [0.6 * A, 0.4 * A, 0.2 * A],
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn full_and_unit_boxes() {
        let m = rasterize_box(&BoundingBox::new(0, 0, 5, 4), 4, 5).unwrap();
        assert_eq!(m.count(), 20);
        let m = rasterize_box(&BoundingBox::new(3, 2, 4, 3), 4, 5).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(2, 3));
    }

    #[test]
    fn box_matches_point_loop() {
        let b = BoundingBox::new(2, 2, 5, 4);
        let m = rasterize_box(&b, 8, 8).unwrap();
        let mut count = 0;
        for j in 0..8 {
            for k in 0..8 {
                let inside = (2..5).contains(&k) && (2..4).contains(&j);
                assert_eq!(m.get(j, k), inside);
                count += inside as usize;
            }
        }
        assert_eq!(count, 6);
        assert_eq!(m.count(), 6);
    }

    #[test]
    fn invalid_boxes() {
        assert!(matches!(
            rasterize_box(&BoundingBox::new(3, 0, 3, 2), 8, 8),
            Err(Error::Layout(_))
        ));
        assert!(rasterize_box(&BoundingBox::new(0, 0, 9, 2), 8, 8).is_err());
    }

    #[test]
    fn white_delta_fills_mask() {
        let delta = named_delta("white").unwrap().to_vec();
        let xi = build_xi(&VisionGuidance::constant(delta.clone(), RegionMask::all_ones(3, 3))).unwrap();
        assert!(xi.data().iter().all(|v| *v == 0.3));
        let zeros = RegionMask::new(3, 3, vec![false; 9], MaskSource::Box).unwrap();
        let xi = build_xi(&VisionGuidance::constant(delta.clone(), zeros.clone())).unwrap();
        assert!(xi.data().iter().all(|v| *v == -0.3));
        let xi = build_xi(&VisionGuidance::suppress_only(delta, zeros.complement())).unwrap();
        assert!(xi.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn null_guidance_has_no_field() {
        assert!(matches!(
            build_xi(&VisionGuidance::null(RegionMask::all_ones(2, 2))),
            Err(Error::Guidance(_))
        ));
    }

    #[test]
    fn top_k_example() {
        // 2x2 row (0.9, 0.1, 0.8, 0.2), K = 2 → positions (0,0) and (1,0)
        let a = AttentionMap::from_rows(1, 2, 2, vec![0.9, 0.1, 0.8, 0.2]).unwrap();
        let x = Grid::from_fn(Shape::new(2, 2, 2), |j, k, l| (10 * j + k) as f64 + 0.5 * l as f64);
        let (delta, set) = compute_dynamic_delta(&a, 0, &x, 2, 0.4).unwrap();
        assert_eq!(set, vec![(0, 0), (1, 0)]);
        let want: Vec<f64> = (0..2)
            .map(|l| 0.4 / 2.0 * (x.get(0, 0, l) + x.get(1, 0, l)))
            .collect();
        assert_eq!(delta, want);
    }

    #[test]
    fn uniform_full_set_and_zero_lambda() {
        let a = AttentionMap::uniform(1, 3, 2);
        let x = Grid::from_fn(Shape::new(3, 2, 1), |j, k, _| (j * 2 + k) as f64);
        let (delta, set) = compute_dynamic_delta(&a, 0, &x, 6, 2.0).unwrap();
        assert_eq!(set.len(), 6);
        assert!((delta[0] - 2.0 * 2.5).abs() < 1e-12);
        let (delta, _) = compute_dynamic_delta(&a, 0, &x, 3, 0.0).unwrap();
        assert_eq!(delta, vec![0.0]);
        assert!(matches!(
            compute_dynamic_delta(&a, 0, &x, 7, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn random_vectors_with_single_member_equal_mean_mode() {
        let x = Grid::from_fn(Shape::new(3, 3, 2), |j, k, l| (j + k + l) as f64 * 0.1);
        let mask = rasterize_box(&BoundingBox::new(0, 0, 2, 2), 3, 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let g = build_dynamic_random(&[(2, 1)], &x, 0.5, &mask, &mut rng).unwrap();
        let random = build_xi(&g).unwrap();
        let mean = build_xi(&VisionGuidance::dynamic_mean(g.delta.clone().unwrap(), mask, 0.5, 1)).unwrap();
        assert_eq!(random, mean);
        assert!(build_dynamic_random(&[], &x, 0.5, &g.mask, &mut rng).is_err());
    }

    #[test]
    fn random_vectors_reproducible() {
        let x = Grid::from_fn(Shape::new(4, 4, 3), |j, k, l| (j * 4 + k) as f64 + l as f64);
        let mask = rasterize_box(&BoundingBox::new(1, 1, 4, 4), 4, 4).unwrap();
        let set = [(0, 0), (1, 2), (3, 3)];
        let a = build_dynamic_random(&set, &x, 0.7, &mask, &mut rand_chacha::ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = build_dynamic_random(&set, &x, 0.7, &mask, &mut rand_chacha::ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}
