//! Scene files.
//!
//! A scene is a TOML document:
//!
//! ```toml
//! schema = "lrdiff-scene/1"
//! global_caption = ["red", "plain"]
//!
//! [canvas]            # optional; defaults to the estimator's resolution
//! height = 12
//! width = 12
//! channels = 3
//!
//! [sampler]           # every key optional
//! steps = 50          # chain length T
//! stride = 1
//! schedule = "linear" # or "scaled-linear"
//! beta_range = [1e-4, 0.02]
//! gamma = 7.5
//! t0 = 15
//! seed = 0
//! deterministic = true
//!
//! [[layers]]
//! caption = ["red"]
//! box = [0, 0, 4, 4]  # x_min, y_min, x_max, y_max; or mask = "cat.pgm"
//! guidance = "constant"
//! delta = [0.9, 0.15, 0.15]   # or a colour name such as "white"
//! lambda = 1.0
//! k = 20
//!
//! [background]        # optional; defaults to the global caption
//! caption = ["plain"]
//!
//! [output]
//! image = "scene.ppm"
//! ```
//!
//! Mask paths are resolved relative to the scene file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{BetaSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::grid::Shape;
use crate::guidance::{named_delta, rasterize_box, BoundingBox, GuidanceMode};
use crate::io::image::read_mask;
use crate::io::toml_error;
use crate::layered::{GuidanceSpec, Layer, SceneSpec};
use crate::score::{TokenSequence, Vocabulary};

pub const SCENE_SCHEMA: &str = "lrdiff-scene/1";
pub const DEFAULT_GAMMA: f64 = 7.5;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_T0: usize = 15;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_K: usize = 20;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    schema: Option<String>,
    global_caption: Option<Vec<String>>,
    canvas: Option<RawCanvas>,
    #[serde(default)]
    sampler: RawSampler,
    #[serde(default)]
    layers: Vec<RawLayer>,
    background: Option<RawBackground>,
    #[serde(default)]
    output: OutputPaths,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCanvas {
    height: usize,
    width: usize,
    #[serde(default = "three")]
    channels: usize,
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSampler {
    steps: Option<usize>,
    stride: Option<usize>,
    schedule: Option<String>,
    beta_range: Option<(f64, f64)>,
    gamma: Option<f64>,
    t0: Option<usize>,
    seed: Option<u64>,
    deterministic: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum RawDelta {
    Name(String),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    caption: Vec<String>,
    #[serde(rename = "box")]
    bbox: Option<[usize; 4]>,
    mask: Option<PathBuf>,
    guidance: Option<String>,
    delta: Option<RawDelta>,
    lambda: Option<f64>,
    k: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackground {
    caption: Vec<String>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    pub image: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Parsed scene plus the bookkeeping the CLI and metrics need.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDocument {
    pub scene: SceneSpec,
    /// Box of each object layer, if it was given as a box.
    pub boxes: Vec<Option<BoundingBox>>,
    pub output: OutputPaths,
    /// `key = value` lines for every default that was applied.
    pub defaults_applied: Vec<String>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneOverrides {
    pub seed: Option<u64>,
    pub gamma: Option<f64>,
    pub t0: Option<usize>,
    pub steps: Option<usize>,
    pub stride: Option<usize>,
    pub deterministic: Option<bool>,
}

fn field(path: &Path, name: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Field {
        path: path.to_path_buf(),
        field: name.into(),
        message: message.into(),
    }
}

fn encode(vocab: &Vocabulary, words: &[String], path: &Path, name: &str) -> Result<TokenSequence> {
    if words.is_empty() {
        return Err(field(path, name, "caption must not be empty"));
    }
    vocab
        .encode(words)
        .map_err(|e| field(path, name, e.to_string()))
}

/// Command line first, then the file, then the default (which is recorded).
fn resolve<T: Copy + std::fmt::Display>(
    applied: &mut Vec<String>,
    name: &str,
    cli: Option<T>,
    file: Option<T>,
    default: T,
) -> T {
    cli.or(file).unwrap_or_else(|| {
        applied.push(format!("sampler.{name} = {default}"));
        default
    })
}

pub fn parse_scene(path: &Path, vocab: &Vocabulary, default_shape: Shape, overrides: &SceneOverrides) -> Result<SceneDocument> {
    let text = std::fs::read_to_string(path)?;
    parse_scene_str(&text, path, vocab, default_shape, overrides)
}

/// Parses scene text; `path` names the source in diagnostics and anchors
/// relative mask paths.
pub fn parse_scene_str(
    text: &str,
    path: &Path,
    vocab: &Vocabulary,
    default_shape: Shape,
    overrides: &SceneOverrides,
) -> Result<SceneDocument> {
    let raw: RawScene = toml::from_str(text).map_err(|e| toml_error(text, path, &e))?;
    match raw.schema.as_deref() {
        Some(SCENE_SCHEMA) => {}
        Some(other) => {
            return Err(field(path, "schema", format!("unsupported schema `{other}`, expected `{SCENE_SCHEMA}`")))
        }
        None => return Err(field(path, "schema", format!("missing; expected `{SCENE_SCHEMA}`"))),
    }
    let global_words = raw
        .global_caption
        .as_ref()
        .ok_or_else(|| field(path, "global_caption", "missing"))?;
    let global_caption = encode(vocab, global_words, path, "global_caption")?;

    let mut defaults = Vec::new();
    let resolution = match &raw.canvas {
        Some(c) => {
            if c.height == 0 || c.width == 0 || c.channels == 0 {
                return Err(field(path, "canvas", "dimensions must be positive"));
            }
            Shape::new(c.height, c.width, c.channels)
        }
        None => {
            defaults.push(format!("canvas = {default_shape}"));
            default_shape
        }
    };

    let s = &raw.sampler;
    let d = &mut defaults;
    let steps = resolve(d, "steps", overrides.steps, s.steps, DEFAULT_STEPS);
    let gamma = resolve(d, "gamma", overrides.gamma, s.gamma, DEFAULT_GAMMA);
    let t0 = resolve(d, "t0", overrides.t0, s.t0, DEFAULT_T0.min(steps));
    let seed = resolve(d, "seed", overrides.seed, s.seed, 0);
    let stride = resolve(d, "stride", overrides.stride, s.stride, 1);
    let deterministic = resolve(d, "deterministic", overrides.deterministic, s.deterministic, true);
    let kind: BetaSchedule = match &s.schedule {
        Some(k) => k.parse().map_err(|e: Error| field(path, "sampler.schedule", e.to_string()))?,
        None => {
            defaults.push("sampler.schedule = linear".into());
            BetaSchedule::Linear
        }
    };
    if steps == 0 {
        return Err(field(path, "sampler.steps", "must be at least 1"));
    }
    if stride == 0 {
        return Err(field(path, "sampler.stride", "must be at least 1"));
    }
    if t0 == 0 || t0 > steps {
        return Err(field(path, "sampler.t0", format!("must lie in [1, {steps}]")));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(field(path, "sampler.gamma", "must be finite and >= 0"));
    }
    if let Some((lo, hi)) = s.beta_range {
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(field(path, "sampler.beta_range", "need 0 < start <= end < 1"));
        }
    }
    let schedule = ScheduleConfig {
        steps,
        kind,
        beta_range: s.beta_range,
        stride,
        t0,
        deterministic,
        strict_stride: true,
    };

    let background_caption = match &raw.background {
        Some(b) => encode(vocab, &b.caption, path, "background.caption")?,
        None => global_caption.clone(),
    };
    let mut scene = SceneSpec::background_only(global_caption, resolution, schedule, gamma, seed);
    scene.layers.last_mut().expect("background").caption = background_caption;

    let base = path.parent().unwrap_or(Path::new("."));
    let mut boxes = Vec::new();
    for (i, l) in raw.layers.iter().enumerate() {
        let at = |name: &str| format!("layers[{i}].{name}");
        let caption = encode(vocab, &l.caption, path, &at("caption"))?;
        let (mask, bbox) = match (&l.bbox, &l.mask) {
            (Some(b), None) => {
                let b = BoundingBox::new(b[0], b[1], b[2], b[3]);
                let m = rasterize_box(&b, resolution.height, resolution.width)
                    .map_err(|e| field(path, at("box"), e.to_string()))?;
                (m, Some(b))
            }
            (None, Some(p)) => {
                let m = read_mask(&base.join(p))?;
                m.check_resolution(resolution)?;
                (m, None)
            }
            (Some(_), Some(_)) => return Err(field(path, at("box"), "give either `box` or `mask`, not both")),
            (None, None) => return Err(field(path, at("box"), "object layers need a `box` or a `mask`")),
        };
        let mode: GuidanceMode = match &l.guidance {
            Some(g) => g.parse().map_err(|e: Error| field(path, at("guidance"), e.to_string()))?,
            None => {
                defaults.push(format!("{} = constant", at("guidance")));
                GuidanceMode::Constant
            }
        };
        let delta = match &l.delta {
            Some(RawDelta::Name(n)) => Some(
                named_delta(n)
                    .ok_or_else(|| field(path, at("delta"), format!("unknown colour `{n}`")))?
                    .to_vec(),
            ),
            Some(RawDelta::Vector(v)) => {
                if v.len() != resolution.channels || v.iter().any(|x| !x.is_finite()) {
                    return Err(field(
                        path,
                        at("delta"),
                        format!("need {} finite values", resolution.channels),
                    ));
                }
                Some(v.clone())
            }
            None => None,
        };
        if mode == GuidanceMode::Constant && delta.is_none() {
            return Err(field(path, at("delta"), "constant guidance needs `delta`"));
        }
        let lambda = l.lambda.unwrap_or(DEFAULT_LAMBDA);
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(field(path, at("lambda"), "must be finite and >= 0"));
        }
        let k = l.k.unwrap_or(DEFAULT_K);
        if k == 0 || k > resolution.pixels() {
            return Err(field(path, at("k"), format!("must lie in [1, {}]", resolution.pixels())));
        }
        let mut guidance = GuidanceSpec::dynamic(mode, lambda, k);
        guidance.delta = delta;
        scene.push_object(Layer::object(caption, mask, guidance));
        boxes.push(bbox);
    }
    scene.validate()?;
    Ok(SceneDocument {
        scene,
        boxes,
        output: raw.output.clone(),
        defaults_applied: defaults,
    })
}

impl std::str::FromStr for SceneOverrides {
    type Err = Error;

    /// `key=value` pairs separated by commas, e.g. `t0=25,gamma=5`.
    fn from_str(s: &str) -> Result<Self> {
        let mut o = SceneOverrides::default();
        let pairs: BTreeMap<&str, &str> = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| Error::Usage(format!("expected key=value, got `{p}`")))
            })
            .collect::<Result<_>>()?;
        let bad = |k: &str, v: &str| Error::Usage(format!("invalid value `{v}` for `{k}`"));
        for (k, v) in pairs {
            match k {
                "seed" => o.seed = Some(v.parse().map_err(|_| bad(k, v))?),
                "gamma" => o.gamma = Some(v.parse().map_err(|_| bad(k, v))?),
                "t0" => o.t0 = Some(v.parse().map_err(|_| bad(k, v))?),
                "steps" => o.steps = Some(v.parse().map_err(|_| bad(k, v))?),
                "stride" => o.stride = Some(v.parse().map_err(|_| bad(k, v))?),
                "deterministic" => o.deterministic = Some(v.parse().map_err(|_| bad(k, v))?),
                other => return Err(Error::Usage(format!("unknown override `{other}`"))),
            }
        }
        Ok(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::OracleDomain;

    fn parse(text: &str) -> Result<SceneDocument> {
        let d = OracleDomain::default();
        parse_scene_str(text, Path::new("scene.toml"), &d.vocabulary(), d.shape(), &SceneOverrides::default())
    }

    #[test]
    fn minimal_file() {
        let doc = parse("schema = \"lrdiff-scene/1\"\nglobal_caption = [\"red\", \"plain\"]\n").unwrap();
        assert_eq!(doc.scene.layers.len(), 1);
        assert!(doc.scene.layers[0].is_background);
        assert_eq!(doc.scene.gamma, 7.5);
        assert_eq!(doc.scene.schedule.t0, 15);
        assert_eq!(doc.scene.schedule.steps, 50);
        assert!(doc.defaults_applied.iter().any(|d| d == "sampler.gamma = 7.5"));
        assert!(doc.defaults_applied.iter().any(|d| d == "sampler.t0 = 15"));
    }

    #[test]
    fn box_layer_on_small_canvas() {
        let doc = parse(
            r#"
schema = "lrdiff-scene/1"
global_caption = ["red", "plain"]
[canvas]
height = 8
width = 8
[[layers]]
caption = ["red"]
box = [2, 2, 5, 4]
delta = "white"
"#,
        )
        .unwrap();
        assert_eq!(doc.scene.layers.len(), 2);
        assert_eq!(doc.scene.layers[0].mask.count(), 6);
        assert_eq!(doc.boxes, vec![Some(BoundingBox::new(2, 2, 5, 4))]);
    }

    #[test]
    fn diagnostics_name_the_field() {
        let err = parse("schema = \"lrdiff-scene/1\"\nglobal_caption = [\"red\"]\ncolour = 1\n").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        let err = parse("global_caption = [\"red\"]\n").unwrap_err();
        assert!(matches!(err, Error::Field { ref field, .. } if field == "schema"));
        let err = parse(
            "schema = \"lrdiff-scene/1\"\nglobal_caption = [\"red\"]\n[[layers]]\ncaption = [\"red\"]\nbox = [0, 0, 20, 4]\ndelta = \"red\"\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Field { ref field, .. } if field == "layers[0].box"));
    }

    #[test]
    fn overrides_win() {
        let d = OracleDomain::default();
        let o: SceneOverrides = "seed=9, t0=25".parse().unwrap();
        let doc = parse_scene_str(
            "schema = \"lrdiff-scene/1\"\nglobal_caption = [\"red\"]\n[sampler]\nseed = 1\n",
            Path::new("s.toml"),
            &d.vocabulary(),
            d.shape(),
            &o,
        )
        .unwrap();
        assert_eq!(doc.scene.seed, 9);
        assert_eq!(doc.scene.schedule.t0, 25);
        assert!("bogus=1".parse::<SceneOverrides>().is_err());
    }
}
