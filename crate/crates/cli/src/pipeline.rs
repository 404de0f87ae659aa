//! End-to-end run: augment, voxelize, extract both RoI volumes per box,
//! fuse them and dump every volume.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use log::{error, info, warn};
use rayon::prelude::*;
use roifuse::depth_prior::augment_points_counted;
use roifuse::gated_fusion::{bgrf_manifest, BgrfWeights};
use roifuse::kitti_io::{read_calibration, read_depth_raster, read_labels, read_point_cloud};
use roifuse::nn::{seeded_init, ParamSpec};
use roifuse::pointgfe::pointgfe_manifest;
use roifuse::roi_pooling::{DownsampleWeights, RoiExtractor};
use roifuse::voxelgrid::{load_voxel_features, parse_voxel_features, POINT_CHANNELS};
use roifuse::{voxelize, Box3D, CascadeOutput, FeatureVolume, Point5, RoiFeatures, SparseVoxelMap, WeightBundle};

use crate::config::PipelineConfig;

/// Width of the voxel feature map the config will produce.
pub fn voxel_channels(cfg: &PipelineConfig) -> Result<usize> {
    let Some(path) = &cfg.voxel_features else {
        return Ok(POINT_CHANNELS);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading voxel features {}", path.display()))?;
    let records = parse_voxel_features(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(records.first().map_or(POINT_CHANNELS, |(_, f)| f.len()))
}

/// Every tensor the pipeline reads, in manifest order.
pub fn model_manifest(cfg: &PipelineConfig, voxel_channels: usize) -> Vec<ParamSpec> {
    let width = cfg.gfe.output_width();
    let mut m = pointgfe_manifest(&cfg.gfe, POINT_CHANNELS);
    m.extend(DownsampleWeights::manifest(width, width));
    m.extend(bgrf_manifest(&cfg.fusion(), voxel_channels, width));
    m
}

pub fn load_weights(cfg: &PipelineConfig, voxel_channels: usize) -> Result<WeightBundle> {
    match &cfg.weights {
        Some(path) => WeightBundle::read(path).with_context(|| format!("loading weights {}", path.display())),
        None => Ok(seeded_init(cfg.seed, &model_manifest(cfg, voxel_channels))),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("config key `{key}` is required"))
}

/// Inputs prepared once per frame.
#[derive(Debug, Clone)]
pub struct Scene {
    pub points: Vec<Point5>,
    pub in_bounds: usize,
    pub map: SparseVoxelMap,
    pub boxes: Vec<Box3D>,
}

pub fn load_scene(cfg: &PipelineConfig) -> Result<Scene> {
    let cloud = read_point_cloud(required(&cfg.cloud, "cloud")?)?;
    let calib = read_calibration(required(&cfg.calib, "calib")?)?;
    let raster = read_depth_raster(required(&cfg.depth, "depth")?)?;
    let (points, in_bounds) = augment_points_counted(&cloud, &raster, &calib);
    let mut map = voxelize(&points, &cfg.grid);
    if let Some(path) = &cfg.voxel_features {
        map = load_voxel_features(map, path)?;
    }
    let mut boxes = cfg.boxes.clone();
    if let Some(path) = &cfg.labels {
        boxes.extend(read_labels(path, &calib)?.into_iter().filter_map(|l| l.bbox));
    }
    Ok(Scene {
        points,
        in_bounds,
        map,
        boxes,
    })
}

/// Model state shared by all boxes of a run.
#[derive(Debug, Clone)]
pub struct Model {
    pub extractor: RoiExtractor,
    pub fusion: BgrfWeights,
}

impl Model {
    pub fn new(cfg: &PipelineConfig, scene: &Scene, bundle: &WeightBundle) -> Result<Self> {
        let extractor = RoiExtractor::new(&scene.points, &scene.map, bundle, &cfg.roi, &cfg.gfe)?;
        let point_channels = extractor.point_path.output_channels();
        let fusion = BgrfWeights::from_bundle(bundle, &cfg.fusion(), scene.map.channels(), point_channels)?;
        Ok(Self { extractor, fusion })
    }

    pub fn process(&self, bbox: &Box3D) -> roifuse::Result<BoxOutput> {
        let features = self.extractor.extract(bbox)?;
        let fused = self.fusion.fuse(&features.voxel, &features.point)?;
        Ok(BoxOutput { features, fused })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxOutput {
    pub features: RoiFeatures,
    pub fused: CascadeOutput,
}

impl BoxOutput {
    /// `(file suffix, volume)` for every dump of one box.
    pub fn volumes(&self) -> Vec<(String, &FeatureVolume)> {
        let mut out = vec![
            ("voxel_path".to_string(), &self.features.voxel),
            ("point_path".to_string(), &self.features.point),
        ];
        for (s, v) in self.fused.stages.iter().enumerate() {
            out.push((format!("stage{}", s + 1), v));
        }
        out.push(("fused_mean".to_string(), &self.fused.mean));
        out
    }
}

pub fn dump_name(index: usize, suffix: &str) -> String {
    format!("box{index:04}.{suffix}.fvol")
}

#[derive(Debug, Clone)]
pub struct BoxOutcome {
    pub index: usize,
    pub bbox: Box3D,
    pub seconds: f64,
    pub result: std::result::Result<(usize, Vec<String>), String>,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub points: usize,
    pub in_bounds: usize,
    pub outcomes: Vec<BoxOutcome>,
}

impl PipelineReport {
    pub fn failed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.result.is_err()).count()
    }
}

pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| anyhow!("building a pool of {jobs} workers: {e}"))
}

/// Runs the whole pipeline and writes dumps plus `manifest.csv` to
/// `cfg.out_dir`. Per-box failures are recorded, not propagated.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let scene = load_scene(cfg)?;
    let bundle = load_weights(cfg, scene.map.channels())?;
    let model = Model::new(cfg, &scene, &bundle)?;
    info!(
        "{} points ({} with a depth prior), {} voxels, {} boxes",
        scene.points.len(),
        scene.in_bounds,
        scene.map.len(),
        scene.boxes.len()
    );

    let pool = thread_pool(cfg.jobs)?;
    let results: Vec<(f64, roifuse::Result<BoxOutput>)> = pool.install(|| {
        scene
            .boxes
            .par_iter()
            .map(|b| {
                let t = Instant::now();
                let r = model.process(b);
                (t.elapsed().as_secs_f64(), r)
            })
            .collect()
    });

    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let mut outcomes = Vec::with_capacity(results.len());
    for (index, ((seconds, result), bbox)) in results.into_iter().zip(&scene.boxes).enumerate() {
        let result = match result {
            Ok(out) => {
                let mut files = Vec::new();
                for (suffix, vol) in out.volumes() {
                    let name = dump_name(index, &suffix);
                    vol.write(cfg.out_dir.join(&name))?;
                    files.push(name);
                }
                Ok((out.features.point_count, files))
            }
            Err(e) => {
                error!("box {index} failed: {e}");
                Err(e.to_string())
            }
        };
        outcomes.push(BoxOutcome {
            index,
            bbox: *bbox,
            seconds,
            result,
        });
    }
    let report = PipelineReport {
        points: scene.points.len(),
        in_bounds: scene.in_bounds,
        outcomes,
    };
    write_manifest(&cfg.out_dir.join("manifest.csv"), &report)?;
    if report.failed() > 0 {
        warn!("{} of {} boxes failed", report.failed(), report.outcomes.len());
    }
    Ok(report)
}

fn write_manifest(path: &Path, report: &PipelineReport) -> Result<()> {
    let mut text = String::from("box,status,points,seconds,cx,cy,cz,l,w,h,yaw,files\n");
    for o in &report.outcomes {
        let b = &o.bbox;
        let (status, points, files) = match &o.result {
            Ok((n, files)) => ("ok".to_string(), n.to_string(), files.join(";")),
            Err(msg) => (format!("failed: {}", msg.replace(',', ";")), String::new(), String::new()),
        };
        text.push_str(&format!(
            "{},{},{},{:.6},{},{},{},{},{},{},{},{}\n",
            o.index, status, points, o.seconds, b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, files
        ));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
