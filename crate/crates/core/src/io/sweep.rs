//! Parameter sweeps over a base scene.
//!
//! A sweep file is TOML:
//!
//! ```toml
//! schema = "lrdiff-sweep/1"
//! scene = "scene.toml"        # relative to the sweep file
//! seeds = { start = 0, count = 50 }   # or an explicit list: seeds = [1, 2, 3]
//!
//! [axes]                      # each axis optional; the grid is their product
//! t0 = [5, 15, 25]
//! mode = ["suppress-only", "constant"]   # "baseline" drops the object layers
//! k = [10, 20]
//! lambda = [0.5, 1.0]
//! gamma = [7.5]
//! ```
//!
//! Axes other than `t0`, `mode`, `k`, `lambda` and `gamma` are rejected.
//! Every configuration renders the same seed list, so reports are paired.
//!
//! Outputs, in the output directory:
//!
//! * `config-NNN.json`: one [`MetricsReport`] per configuration
//! * `sweep.csv`: one row per configuration with columns
//!   `config,t0,mode,k,lambda,gamma,seeds,placement_rate,mean_iou,mean_texture_variance`
//! * `renders.csv`: one row per render with columns
//!   `config,seed,hit,iou,texture_variance`

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceMode;
use crate::io::metrics::{evaluate_placement, placement_targets, MetricsReport};
use crate::io::scene::SceneDocument;
use crate::io::toml_error;
use crate::layered::{render, SceneSpec};
use crate::score::{OracleDomain, ScoreEstimator};

pub const SWEEP_SCHEMA: &str = "lrdiff-sweep/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModeChoice {
    /// Object layers removed: plain guided sampling on the global caption.
    Baseline,
    Guided(GuidanceMode),
}

impl std::fmt::Display for ModeChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModeChoice::Baseline => f.write_str("baseline"),
            ModeChoice::Guided(m) => m.fmt(f),
        }
    }
}

impl std::str::FromStr for ModeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModeChoice::Baseline),
            other => Ok(ModeChoice::Guided(other.parse()?)),
        }
    }
}

impl TryFrom<String> for ModeChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModeChoice> for String {
    fn from(m: ModeChoice) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepAxes {
    pub t0: Option<Vec<usize>>,
    pub mode: Option<Vec<ModeChoice>>,
    pub k: Option<Vec<usize>>,
    pub lambda: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
}

impl SweepAxes {
    /// Builds axes from named value lists; unknown names are configuration errors.
    pub fn from_table(table: &BTreeMap<String, toml::Value>) -> Result<Self> {
        fn list<T>(name: &str, v: &toml::Value, f: impl Fn(&toml::Value) -> Option<T>) -> Result<Vec<T>> {
            let items = v
                .as_array()
                .ok_or_else(|| Error::Config(format!("axis `{name}` must be an array")))?;
            if items.is_empty() {
                return Err(Error::Config(format!("axis `{name}` is empty")));
            }
            items
                .iter()
                .map(|x| f(x).ok_or_else(|| Error::Config(format!("axis `{name}`: invalid value {x}"))))
                .collect()
        }
        let uint = |x: &toml::Value| x.as_integer().and_then(|i| usize::try_from(i).ok());
        let float = |x: &toml::Value| x.as_float().or_else(|| x.as_integer().map(|i| i as f64));
        let mut axes = SweepAxes::default();
        for (name, v) in table {
            match name.as_str() {
                "t0" => axes.t0 = Some(list(name, v, uint)?),
                "k" => axes.k = Some(list(name, v, uint)?),
                "lambda" => axes.lambda = Some(list(name, v, float)?),
                "gamma" => axes.gamma = Some(list(name, v, float)?),
                "mode" => axes.mode = Some(list(name, v, |x| x.as_str().and_then(|s| s.parse().ok()))?),
                other => return Err(Error::Config(format!("unknown sweep axis `{other}`"))),
            }
        }
        Ok(axes)
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        fn opts<T: Copy>(v: &Option<Vec<T>>) -> Vec<Option<T>> {
            match v {
                Some(v) => v.iter().copied().map(Some).collect(),
                None => vec![None],
            }
        }
        let mut out = Vec::new();
        for t0 in opts(&self.t0) {
            for mode in opts(&self.mode) {
                for k in opts(&self.k) {
                    for lambda in opts(&self.lambda) {
                        for gamma in opts(&self.gamma) {
                            out.push(SweepPoint {
                                index: out.len(),
                                t0,
                                mode,
                                k,
                                lambda,
                                gamma,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub t0: Option<usize>,
    pub mode: Option<ModeChoice>,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
}

impl SweepPoint {
    /// The base scene with this point's values applied to every object layer.
    pub fn apply(&self, base: &SceneSpec) -> Result<SceneSpec> {
        let mut scene = base.clone();
        if let Some(t0) = self.t0 {
            scene.schedule.t0 = t0;
        }
        if let Some(g) = self.gamma {
            scene.gamma = g;
        }
        for layer in scene.layers.iter_mut().filter(|l| !l.is_background) {
            if let Some(ModeChoice::Guided(m)) = self.mode {
                layer.guidance.mode = m;
            }
            if let Some(k) = self.k {
                layer.guidance.k = k;
            }
            if let Some(l) = self.lambda {
                layer.guidance.lambda = l;
            }
        }
        if self.mode == Some(ModeChoice::Baseline) {
            scene.layers.retain(|l| l.is_background);
        }
        scene.validate()?;
        Ok(scene)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum RawSeeds {
    List(Vec<u64>),
    Range { start: u64, count: u64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    schema: String,
    scene: PathBuf,
    seeds: RawSeeds,
    #[serde(default)]
    axes: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub scene_path: PathBuf,
    pub seeds: Vec<u64>,
    pub axes: SweepAxes,
}

pub fn parse_sweep(path: &Path) -> Result<SweepConfig> {
    let text = std::fs::read_to_string(path)?;
    let raw: RawSweep = toml::from_str(&text).map_err(|e| toml_error(&text, path, &e))?;
    if raw.schema != SWEEP_SCHEMA {
        return Err(Error::Field {
            path: path.to_path_buf(),
            field: "schema".into(),
            message: format!("expected `{SWEEP_SCHEMA}`"),
        });
    }
    let seeds = match raw.seeds {
        RawSeeds::List(v) => v,
        RawSeeds::Range { start, count } => (start..start + count).collect(),
    };
    if seeds.is_empty() {
        return Err(Error::Field {
            path: path.to_path_buf(),
            field: "seeds".into(),
            message: "no seeds".into(),
        });
    }
    Ok(SweepConfig {
        scene_path: path.parent().unwrap_or(Path::new(".")).join(raw.scene),
        seeds,
        axes: SweepAxes::from_table(&raw.axes)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub point: SweepPoint,
    pub report: MetricsReport,
}

/// Renders every configuration over every seed and scores placement.
/// Renders fan out across threads; results are assembled in seed order.
pub fn run_sweep_in_memory(
    base: &SceneDocument,
    axes: &SweepAxes,
    seeds: &[u64],
    est: &dyn ScoreEstimator,
    domain: &OracleDomain,
) -> Result<Vec<SweepResult>> {
    if seeds.is_empty() {
        return Err(Error::Usage("no seeds".into()));
    }
    let vocab = est.vocabulary();
    let targets = placement_targets(&base.scene, vocab, domain, &base.boxes)?;
    let palette = domain.palette();
    axes.points()
        .into_iter()
        .map(|point| {
            let scene = point.apply(&base.scene)?;
            let outputs = seeds
                .par_iter()
                .map(|&seed| {
                    let mut s = scene.clone();
                    s.seed = seed;
                    render(&s, est).map(|img| (seed, img))
                })
                .collect::<Result<Vec<_>>>()?;
            let config = serde_json::to_value(point).expect("point serializes");
            let report = evaluate_placement(&outputs, &targets, &palette, config)?;
            Ok(SweepResult { point, report })
        })
        .collect()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the per-configuration reports and the two CSV files.
pub fn write_sweep(results: &[SweepResult], base: &SceneDocument, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let csv_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e: csv::Error| Error::Format {
            path: p.clone(),
            message: e.to_string(),
        }
    };
    let summary_path = out_dir.join("sweep.csv");
    let renders_path = out_dir.join("renders.csv");
    let mut summary = csv::Writer::from_path(&summary_path).map_err(csv_err(&summary_path))?;
    let mut renders = csv::Writer::from_path(&renders_path).map_err(csv_err(&renders_path))?;
    summary
        .write_record([
            "config",
            "t0",
            "mode",
            "k",
            "lambda",
            "gamma",
            "seeds",
            "placement_rate",
            "mean_iou",
            "mean_texture_variance",
        ])
        .map_err(csv_err(&summary_path))?;
    renders
        .write_record(["config", "seed", "hit", "iou", "texture_variance"])
        .map_err(csv_err(&renders_path))?;
    for r in results {
        let p = &r.point;
        let report_path = out_dir.join(format!("config-{:03}.json", p.index));
        let json = serde_json::to_string_pretty(&r.report).expect("report serializes");
        std::fs::write(&report_path, json)?;
        let t0 = p.t0.unwrap_or(base.scene.schedule.t0);
        let gamma = p.gamma.unwrap_or(base.scene.gamma);
        summary
            .write_record([
                p.index.to_string(),
                t0.to_string(),
                opt(p.mode),
                opt(p.k),
                opt(p.lambda),
                gamma.to_string(),
                r.report.records.len().to_string(),
                r.report.placement_rate.to_string(),
                r.report.mean_iou.to_string(),
                r.report.mean_texture_variance.to_string(),
            ])
            .map_err(csv_err(&summary_path))?;
        for rec in &r.report.records {
            let n = rec.layers.len() as f64;
            renders
                .write_record([
                    p.index.to_string(),
                    rec.seed.to_string(),
                    rec.hit.to_string(),
                    (rec.layers.iter().map(|l| l.iou).sum::<f64>() / n).to_string(),
                    (rec.layers.iter().map(|l| l.texture_variance).sum::<f64>() / n).to_string(),
                ])
                .map_err(csv_err(&renders_path))?;
        }
    }
    summary.flush()?;
    renders.flush()?;
    Ok(())
}

pub fn run_sweep(
    base: &SceneDocument,
    config: &SweepConfig,
    est: &dyn ScoreEstimator,
    domain: &OracleDomain,
    out_dir: &Path,
) -> Result<Vec<SweepResult>> {
    let results = run_sweep_in_memory(base, &config.axes, &config.seeds, est, domain)?;
    write_sweep(&results, base, out_dir)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_axis_is_config_error() {
        let mut t = BTreeMap::new();
        t.insert("temperature".to_string(), toml::Value::Array(vec![toml::Value::Integer(1)]));
        assert!(matches!(SweepAxes::from_table(&t), Err(Error::Config(_))));
    }

    #[test]
    fn grid_is_cartesian() {
        let axes = SweepAxes {
            t0: Some(vec![5, 15, 25]),
            mode: Some(vec![ModeChoice::Baseline, ModeChoice::Guided(GuidanceMode::Constant)]),
            ..Default::default()
        };
        let pts = axes.points();
        assert_eq!(pts.len(), 6);
        assert!(pts.iter().enumerate().all(|(i, p)| p.index == i));
        assert_eq!(SweepAxes::default().points().len(), 1);
    }

    #[test]
    fn mode_names() {
        assert_eq!("baseline".parse::<ModeChoice>().unwrap(), ModeChoice::Baseline);
        assert_eq!(
            "suppress-only".parse::<ModeChoice>().unwrap(),
            ModeChoice::Guided(GuidanceMode::SuppressOnly)
        );
        assert!("sideways".parse::<ModeChoice>().is_err());
    }
}
