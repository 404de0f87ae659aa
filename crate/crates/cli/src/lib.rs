//! Batch front end for `roifuse`.
//!
//! Exit codes: `0` success, `1` a check or a box failed, `2` usage or I/O
//! error.

pub mod bench;
pub mod config;
pub mod pipeline;
pub mod selfcheck;
pub mod stats;
pub mod synthetic;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use roifuse::depth_prior::augment_points_counted;
use roifuse::kitti_io::{read_calibration, read_depth_raster, read_labels, read_point_cloud, write_points5};

use crate::config::PipelineConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "roifuse", version, about = "Depth-augmented dual-path RoI feature extraction")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; overrides the configured value.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory; overrides the configured value.
    #[arg(long = "out-dir", global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Append a depth prior to every point and write a .bin5 file.
    Augment {
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        depth: Option<PathBuf>,
        /// Output file; defaults to `<out-dir>/augmented.bin5`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract, fuse and dump RoI features for every configured box.
    Pipeline,
    /// Per-class reflectance histograms of points inside labeled boxes.
    Stats {
        /// Label file or directory of `<frame>.txt` files.
        #[arg(long)]
        labels: PathBuf,
        /// Point cloud file or directory of `<frame>.bin` files.
        #[arg(long)]
        clouds: PathBuf,
        /// Calibration file shared by all frames, or a directory of `<frame>.txt`.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Median per-component timings.
    Bench {
        #[arg(long, default_value_t = 5)]
        repeat: usize,
        /// Points in the synthetic scene used when the config names no cloud.
        #[arg(long, default_value_t = 20_000)]
        synthetic_points: usize,
        /// Boxes in the synthetic scene.
        #[arg(long, default_value_t = 8)]
        synthetic_boxes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the embedded oracle and invariant checks.
    Selfcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write a seeded weight bundle covering the configured model.
    InitWeights {
        /// Output file; defaults to `<out-dir>/weights.bin`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            code
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pick<'a>(flag: &'a Option<PathBuf>, cfg: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    match flag.as_deref().or(cfg.as_deref()) {
        Some(p) => Ok(p),
        None => bail!("--{name} is required (or set `{name}` in the config)"),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            ensure_parent(path)?;
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Augment { cloud, calib, depth, out } => {
            let cloud = read_point_cloud(pick(cloud, &cfg.cloud, "cloud")?)?;
            let calib = read_calibration(pick(calib, &cfg.calib, "calib")?)?;
            let raster = read_depth_raster(pick(depth, &cfg.depth, "depth")?)?;
            let (points, in_bounds) = augment_points_counted(&cloud, &raster, &calib);
            let out = out.clone().unwrap_or_else(|| cfg.out_dir.join("augmented.bin5"));
            ensure_parent(&out)?;
            write_points5(&out, &points)?;
            let ratio = if points.is_empty() { 0.0 } else { in_bounds as f64 / points.len() as f64 };
            println!("points {} in_bounds {} ratio {:.4} -> {}", points.len(), in_bounds, ratio, out.display());
            Ok(EXIT_OK)
        }
        Command::Pipeline => {
            if cli.config.is_none() {
                bail!("pipeline needs --config");
            }
            let report = pipeline::run_pipeline(&cfg)?;
            println!(
                "boxes {} failed {} points {} in_bounds {} -> {}",
                report.outcomes.len(),
                report.failed(),
                report.points,
                report.in_bounds,
                cfg.out_dir.join("manifest.csv").display()
            );
            Ok(if report.failed() > 0 { EXIT_FAILURE } else { EXIT_OK })
        }
        Command::Stats { labels, clouds, calib, out } => {
            let source = stats::CalibSource::from_arg(calib.as_deref())?;
            let hist = stats::compute_stats(labels, clouds, &source)?;
            write_text(out.as_deref(), &hist.to_csv())?;
            Ok(EXIT_OK)
        }
        Command::Bench {
            repeat,
            synthetic_points,
            synthetic_boxes,
            out,
        } => {
            let inputs = bench_inputs(&cfg, *synthetic_points, *synthetic_boxes)?;
            let rows = bench::run_bench(&inputs, &cfg, *repeat)?;
            write_text(out.as_deref(), &bench::to_csv(&rows))?;
            Ok(EXIT_OK)
        }
        Command::Selfcheck { inject_fault } => {
            let results = selfcheck::run_checks(inject_fault.as_deref());
            let mut failed = 0;
            for r in &results {
                let verdict = if r.passed() { "PASS" } else { "FAIL" };
                println!("{verdict} {} (error {:.3e}, tolerance {:.1e})", r.name, r.error, r.tolerance);
                failed += usize::from(!r.passed());
            }
            println!("{} checks, {} failed", results.len(), failed);
            Ok(if failed > 0 { EXIT_FAILURE } else { EXIT_OK })
        }
        Command::InitWeights { out } => {
            let channels = pipeline::voxel_channels(&cfg)?;
            let bundle = roifuse::nn::seeded_init(cfg.seed, &pipeline::model_manifest(&cfg, channels));
            let out = out.clone().unwrap_or_else(|| cfg.out_dir.join("weights.bin"));
            ensure_parent(&out)?;
            bundle.write(&out)?;
            println!("{} tensors -> {}", bundle.len(), out.display());
            Ok(EXIT_OK)
        }
    }
}

fn bench_inputs(cfg: &PipelineConfig, n_points: usize, n_boxes: usize) -> Result<bench::BenchInputs> {
    if cfg.cloud.is_none() {
        let scene = synthetic::generate_scene(cfg.seed, n_points, n_boxes);
        return Ok(bench::BenchInputs {
            cloud: scene.points,
            calib: scene.calib,
            raster: scene.raster,
            boxes: scene.boxes,
        });
    }
    let calib = read_calibration(pick(&None, &cfg.calib, "calib")?)?;
    let mut boxes = cfg.boxes.clone();
    if let Some(path) = &cfg.labels {
        boxes.extend(read_labels(path, &calib)?.into_iter().filter_map(|l| l.bbox));
    }
    Ok(bench::BenchInputs {
        cloud: read_point_cloud(pick(&None, &cfg.cloud, "cloud")?)?,
        raster: read_depth_raster(pick(&None, &cfg.depth, "depth")?)?,
        calib,
        boxes,
    })
}
