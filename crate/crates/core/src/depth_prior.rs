//! Depth-prior augmentation: every LiDAR point is projected into a monocular
//! depth raster and the sampled value is appended as a fifth attribute.

use crate::geometry::{lidar_to_rect, rect_to_image, PixelCoord};
use crate::kitti_io::{CalibrationSet, DepthRaster, RawPoint};

/// A LiDAR return extended with a sampled depth prior.
///
/// `d_da == 0` marks points that received no prior (behind the camera or
/// outside the raster).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point5 {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub r: f32,
    pub d_da: f32,
}

impl Point5 {
    pub fn from_raw(p: &RawPoint, d_da: f32) -> Self {
        Self {
            x: p.x,
            y: p.y,
            z: p.z,
            r: p.r,
            d_da,
        }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }

    pub fn features(&self) -> [f32; 5] {
        [self.x, self.y, self.z, self.r, self.d_da]
    }
}

/// Sample coordinate outside `[0, width-1] × [0, height-1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutOfBounds;

/// Bilinear sample with pixel centers at integer coordinates.
pub fn sample_depth(raster: &DepthRaster, u: f64, v: f64) -> Result<f64, OutOfBounds> {
    let (w, h) = (raster.width(), raster.height());
    if w == 0 || h == 0 {
        return Err(OutOfBounds);
    }
    if !(u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64) {
        return Err(OutOfBounds);
    }
    let (i0, fu) = cell_and_frac(u, w);
    let (j0, fv) = cell_and_frac(v, h);
    let i1 = (i0 + 1).min(w - 1);
    let j1 = (j0 + 1).min(h - 1);
    let d00 = raster.get(i0, j0) as f64;
    let d10 = raster.get(i1, j0) as f64;
    let d01 = raster.get(i0, j1) as f64;
    let d11 = raster.get(i1, j1) as f64;
    Ok((1.0 - fu) * (1.0 - fv) * d00 + fu * (1.0 - fv) * d10 + (1.0 - fu) * fv * d01 + fu * fv * d11)
}

// The last row/column is interpolated from the cell to its left/top.
fn cell_and_frac(x: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let i = (x.floor() as usize).min(n - 2);
    (i, x - i as f64)
}

/// Projects a LiDAR point onto the image plane, `None` if behind the camera.
pub fn project_point(p: &RawPoint, calib: &CalibrationSet) -> Option<PixelCoord> {
    rect_to_image(lidar_to_rect(p.position(), calib), &calib.p2).ok()
}

/// Appends a depth prior to every point; never drops or reorders points.
pub fn augment_points(points: &[RawPoint], raster: &DepthRaster, calib: &CalibrationSet) -> Vec<Point5> {
    augment_points_counted(points, raster, calib).0
}

/// Like [`augment_points`], also returning how many points landed in-bounds.
pub fn augment_points_counted(
    points: &[RawPoint],
    raster: &DepthRaster,
    calib: &CalibrationSet,
) -> (Vec<Point5>, usize) {
    let mut in_bounds = 0;
    let out = points
        .iter()
        .map(|p| {
            let d = project_point(p, calib).and_then(|px| sample_depth(raster, px.u, px.v).ok());
            if d.is_some() {
                in_bounds += 1;
            }
            Point5::from_raw(p, d.unwrap_or(0.0) as f32)
        })
        .collect();
    (out, in_bounds)
}
