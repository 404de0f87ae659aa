//! Seeded synthetic scenes for benchmarks, self-checks and tests.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roifuse::kitti_io::{write_depth_raster, write_point_cloud};
use roifuse::{Box3D, CalibrationSet, DepthRaster, RawPoint};

pub const IMAGE_WIDTH: usize = 1242;
pub const IMAGE_HEIGHT: usize = 375;

/// KITTI-style axes: camera x = -lidar y, camera y = -lidar z, camera z = lidar x.
pub fn synthetic_calibration() -> CalibrationSet {
    CalibrationSet {
        p2: [[720.0, 0.0, 620.0, 0.0], [0.0, 720.0, 187.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        tr_velo_to_cam: [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]],
    }
}

/// Smooth depth field over the full image.
pub fn synthetic_raster() -> DepthRaster {
    DepthRaster::from_fn(IMAGE_WIDTH, IMAGE_HEIGHT, |u, v| 8.0 + 0.01 * u as f32 + 0.05 * v as f32)
        .expect("finite synthetic raster")
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub points: Vec<RawPoint>,
    pub calib: CalibrationSet,
    pub raster: DepthRaster,
    pub boxes: Vec<Box3D>,
}

/// Car-sized boxes with half of the points inside them; the rest scatter
/// over the scene, including some behind the sensor.
pub fn generate_scene(seed: u64, n_points: usize, n_boxes: usize) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes: Vec<Box3D> = (0..n_boxes)
        .map(|_| {
            Box3D::new(
                [rng.gen_range(6.0..35.0), rng.gen_range(-10.0..10.0), rng.gen_range(-1.0..0.0)],
                [rng.gen_range(3.5..4.5), rng.gen_range(1.5..1.9), rng.gen_range(1.4..1.7)],
                rng.gen_range(-PI..PI),
            )
            .expect("valid synthetic box")
        })
        .collect();
    let inside = if boxes.is_empty() { 0 } else { n_points / 2 };
    let mut points = Vec::with_capacity(n_points);
    for i in 0..inside {
        let b = &boxes[i % boxes.len()];
        let q = [
            rng.gen_range(-0.5..0.5) * b.l,
            rng.gen_range(-0.5..0.5) * b.w,
            rng.gen_range(-0.5..0.5) * b.h,
        ];
        let p = b.to_world(q);
        points.push(RawPoint::new(p[0] as f32, p[1] as f32, p[2] as f32, rng.gen_range(0.0..0.1)));
    }
    while points.len() < n_points {
        points.push(RawPoint::new(
            rng.gen_range(-5.0..40.0),
            rng.gen_range(-15.0..15.0),
            rng.gen_range(-2.0..1.0),
            rng.gen_range(0.0..1.0),
        ));
    }
    SyntheticScene {
        points,
        calib: synthetic_calibration(),
        raster: synthetic_raster(),
        boxes,
    }
}

impl SyntheticScene {
    /// Writes the scene files plus a `config.txt` referencing them.
    pub fn write(&self, dir: &Path, extra_config: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_point_cloud(dir.join("cloud.bin"), &self.points)?;
        fs::write(dir.join("calib.txt"), self.calib.to_text()).context("writing calib.txt")?;
        write_depth_raster(dir.join("depth.bin"), &self.raster)?;
        let mut cfg = String::from("cloud = cloud.bin\ncalib = calib.txt\ndepth = depth.bin\n");
        for b in &self.boxes {
            cfg.push_str(&format!(
                "box = {:?} {:?} {:?} {:?} {:?} {:?} {:?}\n",
                b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw
            ));
        }
        cfg.push_str(extra_config);
        let path = dir.join("config.txt");
        fs::write(&path, cfg).context("writing config.txt")?;
        Ok(path)
    }
}
