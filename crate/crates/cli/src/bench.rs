//! Per-component timing breakdown.
//!
//! The encoder, the RoI-aware pooling and the fusion cascade are charged for
//! three executions per box, as in a cascaded detector where every
//! refinement stage re-pools its RoIs. Boxes are not refined here, so the
//! repeated executions see identical inputs.

use std::time::Instant;

use anyhow::{bail, Result};
use roifuse::depth_prior::augment_points;
use roifuse::roi_pooling::{downsample_volume, roi_aware_pool, split_points, RoiExtractor, VoxelPooler};
use roifuse::{voxelize, Box3D, CalibrationSet, DepthRaster, RawPoint};

use crate::config::PipelineConfig;
use crate::pipeline::{load_weights, Model, Scene};

/// Component name and executions per box charged to it.
pub const COMPONENTS: [(&str, usize); 7] = [
    ("augment", 1),
    ("voxelize", 1),
    ("grid_pool", 1),
    ("pointgfe", 3),
    ("aware_pool", 3),
    ("downsample", 1),
    ("bgrf", 3),
];

pub const CASCADE_EXECUTIONS: usize = 3;

#[derive(Debug, Clone)]
pub struct BenchInputs {
    pub cloud: Vec<RawPoint>,
    pub calib: CalibrationSet,
    pub raster: DepthRaster,
    pub boxes: Vec<Box3D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub component: &'static str,
    pub stages: usize,
    /// Wall time of every repetition, in seconds.
    pub samples: Vec<f64>,
}

impl BenchRow {
    pub fn median(&self) -> f64 {
        median(&self.samples)
    }
}

pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn timed<T>(acc: &mut f64, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    *acc += t.elapsed().as_secs_f64();
    out
}

pub fn run_bench(inputs: &BenchInputs, cfg: &PipelineConfig, repeat: usize) -> Result<Vec<BenchRow>> {
    if repeat < 3 {
        bail!("bench needs at least 3 repetitions, got {repeat}");
    }
    cfg.validate()?;
    let mut samples = vec![Vec::with_capacity(repeat); COMPONENTS.len()];
    for _ in 0..repeat {
        let mut t = [0.0f64; COMPONENTS.len()];
        let points = timed(&mut t[0], || augment_points(&inputs.cloud, &inputs.raster, &inputs.calib));
        let map = timed(&mut t[1], || voxelize(&points, &cfg.grid));
        let scene = Scene {
            points,
            in_bounds: 0,
            map,
            boxes: inputs.boxes.clone(),
        };
        let bundle = load_weights(cfg, scene.map.channels())?;
        let model = Model::new(cfg, &scene, &bundle)?;
        let extractor: &RoiExtractor = &model.extractor;
        let path = &extractor.point_path;
        let (positions, attributes) = split_points(&scene.points);

        let pooler = timed(&mut t[2], || VoxelPooler::new(&scene.map, cfg.roi.grid_query_radius));
        for b in &scene.boxes {
            let voxel = timed(&mut t[2], || pooler.pool(b, &cfg.roi));
            let mut encoded = None;
            for _ in 0..CASCADE_EXECUTIONS {
                encoded = timed(&mut t[3], || path.crop_and_encode(&positions, &attributes, b, &cfg.roi))?;
            }
            let point = match encoded {
                Some((canonical, embedding)) => {
                    let mut pooled = None;
                    for _ in 0..CASCADE_EXECUTIONS {
                        pooled = Some(timed(&mut t[4], || roi_aware_pool(&canonical, &embedding, b.dims(), cfg.roi.m))?);
                    }
                    let pooled = pooled.expect("at least one execution");
                    timed(&mut t[5], || downsample_volume(&pooled, &path.down))?
                }
                None => roifuse::FeatureVolume::zeros(roifuse::VolumeTag::PointPath, path.output_channels(), cfg.roi.n),
            };
            timed(&mut t[6], || model.fusion.fuse(&voxel, &point))?;
        }
        for (s, v) in samples.iter_mut().zip(t) {
            s.push(v);
        }
    }
    Ok(COMPONENTS
        .iter()
        .zip(samples)
        .map(|(&(component, stages), samples)| BenchRow {
            component,
            stages,
            samples,
        })
        .collect())
}

/// `component,median_seconds,stages,repeat`.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("component,median_seconds,stages,repeat\n");
    for r in rows {
        out.push_str(&format!("{},{:.9},{},{}\n", r.component, r.median(), r.stages, r.samples.len()));
    }
    out
}
