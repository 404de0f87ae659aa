//! Readers and writers for KITTI-convention files plus the `DPR1` depth raster.
//!
//! * Velodyne `.bin`: packed little-endian f32 quadruples `(x, y, z, r)`.
//! * Augmented `.bin5`: packed little-endian f32 quintuples `(x, y, z, r, d)`.
//! * Calibration `.txt`: `KEY: v1 v2 ...` lines; `P2`, `R0_rect` and
//!   `Tr_velo_to_cam` are required.
//! * Labels `.txt`: KITTI 15-column object format (an optional 16th score
//!   column is accepted and ignored).
//! * Depth raster `.dpr`: `b"DPR1"`, width u32 LE, height u32 LE, then
//!   `width * height` f32 LE values, row-major.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::depth_prior::Point5;
use crate::error::{Error, Result};
use crate::geometry::{self, Box3D};

const POINT_BYTES: usize = 16;
const POINT5_BYTES: usize = 20;
const DPR_MAGIC: &[u8; 4] = b"DPR1";

/// One LiDAR return in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    /// Reflectance in [0, 1].
    pub r: f32,
}

impl RawPoint {
    pub fn new(x: f32, y: f32, z: f32, r: f32) -> Self {
        Self { x, y, z, r }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_at(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<Vec<RawPoint>> {
    let path = path.as_ref();
    parse_point_cloud(&read_file(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_point_cloud(bytes: &[u8]) -> Result<Vec<RawPoint>> {
    if !bytes.len().is_multiple_of(POINT_BYTES) {
        return Err(Error::format(format!(
            "point cloud length {} is not a multiple of {POINT_BYTES}",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(POINT_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let p = RawPoint::new(f32_at(rec, 0), f32_at(rec, 4), f32_at(rec, 8), f32_at(rec, 12));
            if [p.x, p.y, p.z, p.r].iter().all(|v| v.is_finite()) {
                Ok(p)
            } else {
                Err(Error::format(format!("non-finite value in point record {i}")))
            }
        })
        .collect()
}

pub fn encode_point_cloud(points: &[RawPoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * POINT_BYTES);
    for p in points {
        for v in [p.x, p.y, p.z, p.r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_point_cloud(path: impl AsRef<Path>, points: &[RawPoint]) -> Result<()> {
    write_file(path.as_ref(), &encode_point_cloud(points))
}

pub fn encode_points5(points: &[Point5]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * POINT5_BYTES);
    for p in points {
        for v in [p.x, p.y, p.z, p.r, p.d_da] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_points5(path: impl AsRef<Path>, points: &[Point5]) -> Result<()> {
    write_file(path.as_ref(), &encode_points5(points))
}

pub fn read_points5(path: impl AsRef<Path>) -> Result<Vec<Point5>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.len() % POINT5_BYTES != 0 {
        return Err(Error::format(format!(
            "{}: length {} is not a multiple of {POINT5_BYTES}",
            path.display(),
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(POINT5_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let p = Point5 {
                x: f32_at(rec, 0),
                y: f32_at(rec, 4),
                z: f32_at(rec, 8),
                r: f32_at(rec, 12),
                d_da: f32_at(rec, 16),
            };
            if p.features().iter().all(|v| v.is_finite()) {
                Ok(p)
            } else {
                Err(Error::format(format!("non-finite value in record {i}")))
            }
        })
        .collect()
}

/// Camera projection and LiDAR → rectified-camera transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    /// 3×4 projection of the rectified reference camera onto image 2.
    pub p2: [[f64; 4]; 3],
    pub r0_rect: [[f64; 3]; 3],
    pub tr_velo_to_cam: [[f64; 4]; 3],
}

impl CalibrationSet {
    pub fn identity() -> Self {
        let eye34 = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        Self {
            p2: eye34,
            r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tr_velo_to_cam: eye34,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.r0_rect;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-3 {
                    return Err(Error::format("R0_rect is not orthonormal"));
                }
            }
        }
        if self.p2[2][2] == 0.0 {
            return Err(Error::format("P2[2][2] must be nonzero"));
        }
        let all = self.p2.iter().flatten().chain(r.iter().flatten()).chain(self.tr_velo_to_cam.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::format("calibration contains non-finite values"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |vals: Vec<f64>| vals.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "P2: {}", join(self.p2.iter().flatten().copied().collect()));
        let _ = writeln!(s, "R0_rect: {}", join(self.r0_rect.iter().flatten().copied().collect()));
        let _ = writeln!(s, "Tr_velo_to_cam: {}", join(self.tr_velo_to_cam.iter().flatten().copied().collect()));
        s
    }
}

fn parse_f64(token: &str, ctx: &str) -> Result<f64> {
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::format(format!("{ctx}: cannot parse `{token}` as a finite decimal"))),
    }
}

fn parse_row_major<const R: usize, const C: usize>(key: &str, values: &[f64]) -> Result<[[f64; C]; R]> {
    if values.len() != R * C {
        return Err(Error::format(format!("{key}: expected {} values, found {}", R * C, values.len())));
    }
    let mut m = [[0.0; C]; R];
    for (i, v) in values.iter().enumerate() {
        m[i / C][i % C] = *v;
    }
    Ok(m)
}

pub fn read_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calibration(&text)
}

pub fn parse_calibration(text: &str) -> Result<CalibrationSet> {
    let mut p2 = None;
    let mut r0 = None;
    let mut tr = None;
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim();
        let slot = match key {
            "P2" => &mut p2,
            "R0_rect" => &mut r0,
            "Tr_velo_to_cam" => &mut tr,
            _ => continue,
        };
        let values = rest
            .split_whitespace()
            .map(|t| parse_f64(t, key))
            .collect::<Result<Vec<_>>>()?;
        *slot = Some(values);
    }
    let p2 = p2.ok_or_else(|| Error::MissingCalib("P2".into()))?;
    let r0 = r0.ok_or_else(|| Error::MissingCalib("R0_rect".into()))?;
    let tr = tr.ok_or_else(|| Error::MissingCalib("Tr_velo_to_cam".into()))?;
    let calib = CalibrationSet {
        p2: parse_row_major::<3, 4>("P2", &p2)?,
        r0_rect: parse_row_major::<3, 3>("R0_rect", &r0)?,
        tr_velo_to_cam: parse_row_major::<3, 4>("Tr_velo_to_cam", &tr)?,
    };
    calib.validate()?;
    Ok(calib)
}

/// Row-major single-precision depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRaster {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DepthRaster {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::format(format!(
                "raster {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::format(format!("raster value {i} is negative or non-finite")));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Value at column `u`, row `v`.
    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(DPR_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[0..4] != DPR_MAGIC {
            return Err(Error::format("depth raster: bad magic (expected DPR1)"));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("depth raster: dimensions overflow"))?;
        let payload = &bytes[12..];
        if payload.len() != expected {
            return Err(Error::format(format!(
                "depth raster: payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(width, height, data)
    }
}

pub fn read_depth_raster(path: impl AsRef<Path>) -> Result<DepthRaster> {
    let path = path.as_ref();
    DepthRaster::decode(&read_file(path)?)
}

pub fn write_depth_raster(path: impl AsRef<Path>, raster: &DepthRaster) -> Result<()> {
    write_file(path.as_ref(), &raster.encode())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
    Other,
}

impl ObjectClass {
    pub fn from_kitti(name: &str) -> Self {
        match name {
            "Car" => ObjectClass::Car,
            "Pedestrian" => ObjectClass::Pedestrian,
            "Cyclist" => ObjectClass::Cyclist,
            _ => ObjectClass::Other,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
            ObjectClass::Other => "Other",
        }
    }
}

/// A ground-truth object converted to the LiDAR frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBox {
    /// `None` only for `DontCare` rows, which carry placeholder geometry.
    pub bbox: Option<Box3D>,
    pub class: ObjectClass,
    /// Original KITTI type string, e.g. `Van` or `DontCare`.
    pub kitti_type: String,
    pub dont_care: bool,
    pub truncation: f64,
    pub occlusion: i32,
    /// 2D image box `(left, top, right, bottom)`.
    pub bbox_2d: [f64; 4],
}

pub fn read_labels(path: impl AsRef<Path>, calib: &CalibrationSet) -> Result<Vec<LabeledBox>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, calib)
}

pub fn parse_labels(text: &str, calib: &CalibrationSet) -> Result<Vec<LabeledBox>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_err = |msg: String| Error::format(format!("label line {}: {msg}", lineno + 1));
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 15 && cols.len() != 16 {
            return Err(line_err(format!("expected 15 columns, found {}", cols.len())));
        }
        let nums = cols[1..15]
            .iter()
            .map(|t| parse_f64(t, "label"))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| line_err(e.to_string()))?;
        let kitti_type = cols[0].to_string();
        let dont_care = kitti_type == "DontCare";
        let (h, w, l) = (nums[7], nums[8], nums[9]);
        let loc = [nums[10], nums[11], nums[12]];
        let ry = nums[13];

        let bbox = if h > 0.0 && w > 0.0 && l > 0.0 {
            Some(label_box_to_lidar(loc, [l, w, h], ry, calib).map_err(|e| line_err(e.to_string()))?)
        } else if dont_care {
            None
        } else {
            return Err(line_err(format!("non-positive dimensions h={h} w={w} l={l}")));
        };

        out.push(LabeledBox {
            bbox,
            class: ObjectClass::from_kitti(&kitti_type),
            kitti_type,
            dont_care,
            truncation: nums[0],
            occlusion: nums[1] as i32,
            bbox_2d: [nums[3], nums[4], nums[5], nums[6]],
        });
    }
    Ok(out)
}

/// Converts a camera-frame bottom-center location and `ry` into a LiDAR-frame
/// box. The center is lifted by `h/2` along LiDAR +z; the yaw is the LiDAR
/// heading of the camera-frame box x axis `(cos ry, 0, -sin ry)`.
fn label_box_to_lidar(loc_rect: [f64; 3], dims: [f64; 3], ry: f64, calib: &CalibrationSet) -> Result<Box3D> {
    let bottom = geometry::rect_to_lidar(loc_rect, calib)?;
    let h = dims[2];
    let center = [bottom[0], bottom[1], bottom[2] + h / 2.0];
    let heading = geometry::rect_dir_to_lidar([ry.cos(), 0.0, -ry.sin()], calib)?;
    let yaw = heading[1].atan2(heading[0]);
    Box3D::new(center, dims, yaw)
}
