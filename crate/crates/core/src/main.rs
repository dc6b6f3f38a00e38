use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lrdiff::diffusion::{BetaSchedule, Schedule, ScheduleConfig};
use lrdiff::editing::{ddim_invert, edit_scene, outside_mask_mse, reconstruct};
use lrdiff::guidance::RegionMask;
use lrdiff::io::image::{read_image, write_image};
use lrdiff::io::metrics::{evaluate_placement, placement_targets};
use lrdiff::io::scene::{parse_scene, SceneDocument, SceneOverrides};
use lrdiff::io::sweep::{parse_sweep, run_sweep};
use lrdiff::layered::render;
use lrdiff::score::{load_checkpoint, save_checkpoint, train_toy_score, OracleDomain, ScoreEstimator, TrainConfig};
use lrdiff::{Error, Result};

#[derive(Parser)]
#[command(name = "lrdiff", version, about = "Layered rendering diffusion on a desk-scale template domain")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// RNG seed; overrides the scene file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (or directory for `sweep`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `analytic` or `toy:<checkpoint.json>`.
    #[arg(long, global = true, default_value = "analytic")]
    estimator: String,
    /// Directory for outputs without an explicit path.
    #[arg(long, global = true, env = "LRDIFF_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Clone, Default)]
struct SamplerFlags {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    t0: Option<usize>,
    /// Chain length T.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Use the ancestral sampler instead of DDIM.
    #[arg(long)]
    stochastic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene file to a PPM image.
    Render {
        scene: PathBuf,
        #[command(flatten)]
        sampler: SamplerFlags,
        /// Also score placement against the scene's object layers.
        #[arg(long)]
        metrics: bool,
    },
    /// Invert a source image and render an edited scene from it.
    Edit {
        scene: PathBuf,
        #[arg(long)]
        source: PathBuf,
        /// Caption of the source image, comma separated.
        #[arg(long)]
        source_caption: String,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Invert an image to a latent and report the round-trip error.
    Invert {
        image: PathBuf,
        /// Comma separated caption.
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Also write the reconstruction here.
        #[arg(long)]
        reconstruction: Option<PathBuf>,
    },
    /// Run a parameter sweep and write JSON and CSV reports.
    Sweep { config: PathBuf },
    /// Train the toy score network on the template domain.
    TrainToy {
        #[arg(long, default_value_t = 3000)]
        iterations: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Chain length T used for the noise levels.
        #[arg(long, default_value_t = 50)]
        chain_steps: usize,
    },
    /// Parse and validate a scene file, echoing applied defaults.
    Validate { scene: PathBuf },
}

fn load_estimator(spec: &str) -> Result<Box<dyn ScoreEstimator>> {
    if spec == "analytic" {
        return Ok(Box::new(OracleDomain::default().estimator()?));
    }
    match spec.strip_prefix("toy:") {
        Some(path) => Ok(Box::new(load_checkpoint(Path::new(path))?)),
        None => Err(Error::Usage(format!(
            "unknown estimator `{spec}`; use `analytic` or `toy:<checkpoint>`"
        ))),
    }
}

fn overrides(common: &Common, flags: &SamplerFlags) -> SceneOverrides {
    SceneOverrides {
        seed: common.seed,
        gamma: flags.gamma,
        t0: flags.t0,
        steps: flags.steps,
        stride: flags.stride,
        deterministic: flags.stochastic.then_some(false),
    }
}

fn load_scene(path: &Path, est: &dyn ScoreEstimator, o: &SceneOverrides) -> Result<SceneDocument> {
    let doc = parse_scene(path, est.vocabulary(), est.shape(), o)?;
    for d in &doc.defaults_applied {
        eprintln!("default: {d}");
    }
    Ok(doc)
}

fn output_path(common: &Common, from_scene: Option<&PathBuf>, fallback: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| from_scene.cloned())
        .unwrap_or_else(|| common.out_dir.join(fallback))
}

fn words(caption: &str) -> Vec<String> {
    caption
        .split([',', ' '])
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Render { scene, sampler, metrics } => {
            let est = load_estimator(&common.estimator)?;
            let doc = load_scene(scene, est.as_ref(), &overrides(common, sampler))?;
            let image = render(&doc.scene, est.as_ref())?;
            let out = output_path(common, doc.output.image.as_ref(), "render.ppm");
            write_image(&image, &out)?;
            println!("wrote {}", out.display());
            if *metrics {
                let domain = OracleDomain::default();
                let targets = placement_targets(&doc.scene, est.vocabulary(), &domain, &doc.boxes)?;
                let report = evaluate_placement(
                    &[(doc.scene.seed, image)],
                    &targets,
                    &domain.palette(),
                    serde_json::Value::Null,
                )?;
                println!("{}", serde_json::to_string_pretty(&report.records[0]).expect("serializable"));
            }
        }
        Command::Edit {
            scene,
            source,
            source_caption,
            sampler,
        } => {
            let est = load_estimator(&common.estimator)?;
            let doc = load_scene(scene, est.as_ref(), &overrides(common, sampler))?;
            let src = read_image(source)?;
            let caption = est.vocabulary().encode(&words(source_caption))?;
            let result = edit_scene(&src, &caption, &doc.scene, est.as_ref())?;
            let out = output_path(common, doc.output.image.as_ref(), "edit.ppm");
            write_image(&result.output, &out)?;
            let masks: Vec<&RegionMask> = doc.scene.object_layers().map(|l| &l.mask).collect();
            if let Some(mse) = outside_mask_mse(&result.output, &src, &masks)? {
                println!("outside-mask mse: {mse:.6}");
            }
            println!("wrote {}", out.display());
        }
        Command::Invert {
            image,
            caption,
            steps,
            reconstruction,
        } => {
            let est = load_estimator(&common.estimator)?;
            let x0 = read_image(image)?;
            let caption = est.vocabulary().encode(&words(caption))?;
            let sched = Schedule::new(&ScheduleConfig::new(*steps, BetaSchedule::Linear, (*steps).min(15)))?;
            let inv = ddim_invert(&x0, est.as_ref(), &caption, &sched)?;
            let (recon, mse) = reconstruct(&x0, &inv, est.as_ref(), &sched)?;
            println!("round-trip mse: {mse:.3e}");
            let out = output_path(common, None, "latent.json");
            std::fs::write(&out, serde_json::to_string(&inv).expect("serializable"))?;
            println!("wrote {}", out.display());
            if let Some(p) = reconstruction {
                write_image(&recon, p)?;
                println!("wrote {}", p.display());
            }
        }
        Command::Sweep { config } => {
            let est = load_estimator(&common.estimator)?;
            let cfg = parse_sweep(config)?;
            let o = SceneOverrides {
                seed: common.seed,
                ..Default::default()
            };
            let doc = load_scene(&cfg.scene_path, est.as_ref(), &o)?;
            let out = common.out.clone().unwrap_or_else(|| common.out_dir.clone());
            let results = run_sweep(&doc, &cfg, est.as_ref(), &OracleDomain::default(), &out)?;
            for r in &results {
                println!(
                    "config {:03}: placement {:.3}  iou {:.3}",
                    r.point.index, r.report.placement_rate, r.report.mean_iou
                );
            }
            println!("wrote {} reports to {}", results.len(), out.display());
        }
        Command::TrainToy {
            iterations,
            lr,
            batch,
            chain_steps,
        } => {
            let domain = OracleDomain::default();
            let sched = Schedule::new(&ScheduleConfig::new(*chain_steps, BetaSchedule::Linear, (*chain_steps).min(15)))?;
            let hyper = TrainConfig {
                steps: *iterations,
                learning_rate: *lr,
                batch_size: *batch,
                ..TrainConfig::default()
            };
            let (net, report) = train_toy_score(
                &domain.distribution()?,
                &domain.vocabulary(),
                &sched,
                &hyper,
                common.seed.unwrap_or(0),
            )?;
            println!(
                "validation loss {:.5} -> {:.5}",
                report.initial_validation_loss, report.final_validation_loss
            );
            let out = output_path(common, None, "toy.json");
            save_checkpoint(&net, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Validate { scene } => {
            let est = load_estimator(&common.estimator)?;
            let o = SceneOverrides {
                seed: common.seed,
                ..Default::default()
            };
            let doc = load_scene(scene, est.as_ref(), &o)?;
            let s = &doc.scene;
            println!(
                "ok: {} object layer(s), {} canvas, T = {}, t0 = {}, gamma = {}, seed = {}",
                s.object_layers().count(),
                s.resolution,
                s.schedule.steps,
                s.schedule.t0,
                s.gamma,
                s.seed
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
