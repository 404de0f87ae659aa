//! Coordinate transforms, oriented-box membership and canonical-frame
//! normalization.
//!
//! Boxes rotate about the LiDAR up axis (+z) only. Yaw is measured from +x,
//! counterclockwise positive, and kept in (-π, π].

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kitti_io::CalibrationSet;

pub type Vec3 = [f64; 3];

/// Default enlargement applied to every half-extent before point assignment.
pub const DEFAULT_MARGIN: f64 = 0.2;

/// Oriented 3D box in the LiDAR frame, centered at its geometric center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    /// Extent along the box-local x axis.
    pub l: f64,
    /// Extent along the box-local y axis.
    pub w: f64,
    /// Extent along the box-local z axis.
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Vec3, dims: Vec3, yaw: f64) -> Result<Self> {
        let [l, w, h] = dims;
        if !(l > 0.0 && w > 0.0 && h > 0.0) || !l.is_finite() || !w.is_finite() || !h.is_finite() {
            return Err(Error::Invalid(format!("box dimensions must be positive, got {dims:?}")));
        }
        if !yaw.is_finite() || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Invalid("box center and yaw must be finite".into()));
        }
        Ok(Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l,
            w,
            h,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn center(&self) -> Vec3 {
        [self.cx, self.cy, self.cz]
    }

    pub fn dims(&self) -> Vec3 {
        [self.l, self.w, self.h]
    }

    /// Rotates the box about the world up axis through the origin.
    pub fn rotated(&self, angle: f64) -> Self {
        let [cx, cy, cz] = rotate_z(self.center(), angle);
        Self {
            cx,
            cy,
            cz,
            yaw: normalize_angle(self.yaw + angle),
            ..*self
        }
    }

    /// Maps a world-frame point into the box frame.
    #[inline]
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.cz]
    }

    /// Maps a box-frame point back to the world frame.
    #[inline]
    pub fn to_world(&self, q: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        [
            c * q[0] - s * q[1] + self.cx,
            s * q[0] + c * q[1] + self.cy,
            q[2] + self.cz,
        ]
    }

    /// Closed-box membership test with every half-extent enlarged by `margin`.
    #[inline]
    pub fn contains(&self, p: Vec3, margin: f64) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= self.l / 2.0 + margin
            && q[1].abs() <= self.w / 2.0 + margin
            && q[2].abs() <= self.h / 2.0 + margin
    }
}

/// Wraps an angle into (-π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let t = a.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

#[inline]
pub fn rotate_z(p: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// Projected pixel location plus camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
    pub depth_cam: f64,
}

/// LiDAR frame to rectified camera frame: `R0 · Tr · [p; 1]`.
pub fn lidar_to_rect(p: Vec3, calib: &CalibrationSet) -> Vec3 {
    let tr = &calib.tr_velo_to_cam;
    let mut cam = [0.0; 3];
    for (r, out) in cam.iter_mut().enumerate() {
        *out = tr[r][0] * p[0] + tr[r][1] * p[1] + tr[r][2] * p[2] + tr[r][3];
    }
    mat3_mul_vec(&calib.r0_rect, cam)
}

/// Inverse of [`lidar_to_rect`].
pub fn rect_to_lidar(p: Vec3, calib: &CalibrationSet) -> Result<Vec3> {
    let r0_inv = mat3_inverse(&calib.r0_rect)
        .ok_or_else(|| Error::Invalid("R0_rect is singular".into()))?;
    let cam = mat3_mul_vec(&r0_inv, p);
    let tr = &calib.tr_velo_to_cam;
    let rot = [
        [tr[0][0], tr[0][1], tr[0][2]],
        [tr[1][0], tr[1][1], tr[1][2]],
        [tr[2][0], tr[2][1], tr[2][2]],
    ];
    let rot_inv =
        mat3_inverse(&rot).ok_or_else(|| Error::Invalid("Tr_velo_to_cam rotation is singular".into()))?;
    let shifted = [cam[0] - tr[0][3], cam[1] - tr[1][3], cam[2] - tr[2][3]];
    Ok(mat3_mul_vec(&rot_inv, shifted))
}

/// Rotation-only part of the rect → LiDAR map, for direction vectors.
pub(crate) fn rect_dir_to_lidar(d: Vec3, calib: &CalibrationSet) -> Result<Vec3> {
    let origin = rect_to_lidar([0.0; 3], calib)?;
    let tip = rect_to_lidar(d, calib)?;
    Ok([tip[0] - origin[0], tip[1] - origin[1], tip[2] - origin[2]])
}

/// Pinhole projection of a rectified-frame point through a 3×4 matrix.
pub fn rect_to_image(p: Vec3, proj: &[[f64; 4]; 3]) -> Result<PixelCoord> {
    let row = |r: usize| proj[r][0] * p[0] + proj[r][1] * p[1] + proj[r][2] * p[2] + proj[r][3];
    let depth = row(2);
    if !(depth > 0.0) {
        return Err(Error::BehindCamera(depth));
    }
    Ok(PixelCoord {
        u: row(0) / depth,
        v: row(1) / depth,
        depth_cam: depth,
    })
}

/// Back-projects a pixel at a given projective depth into the rectified frame.
pub fn image_to_rect(px: &PixelCoord, proj: &[[f64; 4]; 3]) -> Result<Vec3> {
    let m = [
        [proj[0][0], proj[0][1], proj[0][2]],
        [proj[1][0], proj[1][1], proj[1][2]],
        [proj[2][0], proj[2][1], proj[2][2]],
    ];
    let inv = mat3_inverse(&m).ok_or_else(|| Error::Invalid("projection is singular".into()))?;
    let d = px.depth_cam;
    let rhs = [px.u * d - proj[0][3], px.v * d - proj[1][3], d - proj[2][3]];
    Ok(mat3_mul_vec(&inv, rhs))
}

/// Indices of points inside the (enlarged) box, in ascending order.
pub fn points_in_box(points: &[Vec3], bbox: &Box3D, margin: f64) -> Vec<usize> {
    debug_assert!(margin >= 0.0);
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| bbox.contains(**p, margin))
        .map(|(i, _)| i)
        .collect()
}

/// Expresses points in the box frame: `Rz(-yaw) · (p - center)`.
pub fn canonicalize(points: &[Vec3], bbox: &Box3D) -> Vec<Vec3> {
    points.iter().map(|p| bbox.to_local(*p)).collect()
}

pub(crate) fn mat3_mul_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn mat3_inverse(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    if det.abs() < 1e-300 {
        return None;
    }
    let inv_det = 1.0 / det;
    Some([
        [
            c00 * inv_det,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det,
        ],
        [
            c01 * inv_det,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det,
        ],
        [
            c02 * inv_det,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det,
        ],
    ])
}
