//! Placement metrics for the template domain.
//!
//! Segmentation is nearest-palette-colour matching: a pixel belongs to an
//! object when its nearest palette entry is that object's colour. This is
//! specific to the flat-colour template domain and is not a general detector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::guidance::{BoundingBox, RegionMask};
use crate::layered::SceneSpec;
use crate::score::{OracleDomain, Vocabulary};

/// What one object layer should have produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementTarget {
    pub color_name: String,
    pub color: [f64; 3],
    pub mask: RegionMask,
    /// When set, the centroid test uses the box; otherwise the pixel nearest
    /// the centroid must lie in the mask.
    pub bbox: Option<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub color: String,
    pub area: usize,
    pub centroid: Option<(f64, f64)>,
    pub hit: bool,
    pub iou: f64,
    /// Mean per-channel variance of the segmented pixels.
    pub texture_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    /// Every layer placed.
    pub hit: bool,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub placement_rate: f64,
    pub mean_iou: f64,
    pub mean_texture_variance: f64,
    pub records: Vec<SeedRecord>,
    pub config: serde_json::Value,
}

/// Targets for every object layer whose caption names a domain colour.
pub fn placement_targets(
    scene: &SceneSpec,
    vocab: &Vocabulary,
    domain: &OracleDomain,
    boxes: &[Option<BoundingBox>],
) -> Result<Vec<PlacementTarget>> {
    let mut out = Vec::new();
    for (i, layer) in scene.object_layers().enumerate() {
        let color_name = vocab
            .decode(&layer.caption)
            .into_iter()
            .find(|w| domain.color(w).is_some())
            .ok_or_else(|| Error::Usage(format!("object layer {i} names no domain colour")))?;
        out.push(PlacementTarget {
            color: domain.color(&color_name).expect("checked"),
            color_name,
            mask: layer.mask.clone(),
            bbox: boxes.get(i).copied().flatten(),
        });
    }
    Ok(out)
}

/// Pixels whose nearest palette entry is `color`.
pub fn segment(image: &Grid, palette: &[[f64; 3]], color: [f64; 3]) -> Vec<bool> {
    let shape = image.shape();
    let mut out = Vec::with_capacity(shape.pixels());
    for j in 0..shape.height {
        for k in 0..shape.width {
            let px = image.pixel(j, k);
            let dist = |c: &[f64; 3]| px.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let nearest = palette
                .iter()
                .min_by(|a, b| dist(a).total_cmp(&dist(b)))
                .expect("non-empty palette");
            out.push(*nearest == color);
        }
    }
    out
}

fn layer_record(image: &Grid, palette: &[[f64; 3]], target: &PlacementTarget) -> Result<LayerRecord> {
    let shape = image.shape();
    target.mask.check_resolution(shape)?;
    let region = segment(image, palette, target.color);
    let area = region.iter().filter(|b| **b).count();
    let (mut inter, mut union) = (0usize, 0usize);
    for (r, m) in region.iter().zip(target.mask.bits()) {
        inter += (*r && *m) as usize;
        union += (*r || *m) as usize;
    }
    let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    if area == 0 {
        return Ok(LayerRecord {
            color: target.color_name.clone(),
            area,
            centroid: None,
            hit: false,
            iou: 0.0,
            texture_variance: 0.0,
        });
    }
    let (mut cy, mut cx) = (0.0, 0.0);
    let d = shape.channels;
    let members: Vec<(usize, usize)> = region
        .iter()
        .enumerate()
        .filter(|(_, r)| **r)
        .map(|(p, _)| (p / shape.width, p % shape.width))
        .collect();
    // shifted by the first member so a flat region gives exactly zero
    let origin = image.pixel(members[0].0, members[0].1).to_vec();
    let (mut sum, mut sq) = (vec![0.0; d], vec![0.0; d]);
    for &(j, k) in &members {
        cy += j as f64;
        cx += k as f64;
        for (l, v) in image.pixel(j, k).iter().enumerate() {
            let dv = v - origin[l];
            sum[l] += dv;
            sq[l] += dv * dv;
        }
    }
    let n = area as f64;
    let centroid = (cy / n, cx / n);
    let hit = match target.bbox {
        Some(b) => b.contains(centroid.0, centroid.1),
        None => target
            .mask
            .get(centroid.0.round() as usize, centroid.1.round() as usize),
    };
    let texture_variance = (0..d).map(|l| (sq[l] / n - (sum[l] / n).powi(2)).max(0.0)).sum::<f64>() / d as f64;
    Ok(LayerRecord {
        color: target.color_name.clone(),
        area,
        centroid: Some(centroid),
        hit,
        iou,
        texture_variance,
    })
}

/// Scores `(seed, image)` outputs against the targets.
pub fn evaluate_placement(
    outputs: &[(u64, Grid)],
    targets: &[PlacementTarget],
    palette: &[[f64; 3]],
    config: serde_json::Value,
) -> Result<MetricsReport> {
    if outputs.is_empty() {
        return Err(Error::Usage("no outputs to evaluate".into()));
    }
    if targets.is_empty() {
        return Err(Error::Usage("no placement targets".into()));
    }
    if palette.is_empty() {
        return Err(Error::Usage("empty palette".into()));
    }
    let shape = outputs[0].1.shape();
    let mut records = Vec::with_capacity(outputs.len());
    for (seed, image) in outputs {
        if image.shape() != shape {
            return Err(Error::dims(shape, image.shape()));
        }
        let layers = targets
            .iter()
            .map(|t| layer_record(image, palette, t))
            .collect::<Result<Vec<_>>>()?;
        records.push(SeedRecord {
            seed: *seed,
            hit: layers.iter().all(|l| l.hit),
            layers,
        });
    }
    let n = records.len() as f64;
    let per_layer = |f: fn(&LayerRecord) -> f64| {
        records
            .iter()
            .map(|r| r.layers.iter().map(f).sum::<f64>() / r.layers.len() as f64)
            .sum::<f64>()
            / n
    };
    Ok(MetricsReport {
        placement_rate: records.iter().filter(|r| r.hit).count() as f64 / n,
        mean_iou: per_layer(|l| l.iou),
        mean_texture_variance: per_layer(|l| l.texture_variance),
        config,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::rasterize_box;

    fn domain_target(cell: usize) -> (OracleDomain, PlacementTarget) {
        let d = OracleDomain::default();
        let (x0, y0, x1, y1) = d.cell_box(cell);
        let b = BoundingBox::new(x0, y0, x1, y1);
        let t = PlacementTarget {
            color_name: "red".into(),
            color: d.color("red").unwrap(),
            mask: rasterize_box(&b, d.height, d.width).unwrap(),
            bbox: Some(b),
        };
        (d, t)
    }

    #[test]
    fn blob_equal_to_mask_has_unit_iou() {
        let (d, t) = domain_target(4);
        let img = d.render_blob(t.color, 4);
        let r = evaluate_placement(&[(0, img)], &[t], &d.palette(), serde_json::Value::Null).unwrap();
        assert_eq!(r.placement_rate, 1.0);
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.records[0].layers[0].texture_variance, 0.0);
    }

    #[test]
    fn blank_output_is_a_miss() {
        let (d, t) = domain_target(0);
        let r = evaluate_placement(&[(3, d.render_empty())], &[t], &d.palette(), serde_json::Value::Null).unwrap();
        assert_eq!(r.placement_rate, 0.0);
        assert_eq!(r.mean_iou, 0.0);
        assert_eq!(r.records[0].layers[0].centroid, None);
    }

    #[test]
    fn empty_output_list_is_usage_error() {
        let (d, t) = domain_target(0);
        assert!(matches!(
            evaluate_placement(&[], &[t], &d.palette(), serde_json::Value::Null),
            Err(Error::Usage(_))
        ));
    }
}
