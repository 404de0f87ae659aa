//! Dual-path RoI feature extraction.
//!
//! * Voxel path: `n³` grid points per box, each averaging the voxel features
//!   found by a ball query around it.
//! * Point path: crop (with margin), canonicalize, encode with PointGFE,
//!   max-pool into `m³` sub-voxels, then downsample to `n³` with a stride-2
//!   `2×2×2` convolution followed by ReLU.
//!
//! Volumes are `[C, g, g, g]` with the spatial axes ordered `(z, y, x)`, so
//! the flat cell index is `ix + g * (iy + g * iz)`, matching the grid point
//! order (x fastest).

use std::fmt;
use std::fs;
use std::path::Path;

use log::debug;

use crate::depth_prior::Point5;
use crate::error::{Error, Result};
use crate::geometry::{Box3D, Vec3};
use crate::nn::{conv3d_forward, ParamSpec, Tensor, WeightBundle};
use crate::pointgfe::{encode_points, PointGFEConfig, PointGFEWeights};
use crate::spatial_index::{build_index, GridHashIndex};
use crate::voxelgrid::SparseVoxelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeTag {
    VoxelPath,
    PointPath,
    Fused,
}

impl VolumeTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            VolumeTag::VoxelPath => "voxel_path",
            VolumeTag::PointPath => "point_path",
            VolumeTag::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "voxel_path" => Some(VolumeTag::VoxelPath),
            "point_path" => Some(VolumeTag::PointPath),
            "fused" => Some(VolumeTag::Fused),
            _ => None,
        }
    }
}

impl fmt::Display for VolumeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dense cubic RoI feature block with a provenance tag.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub tag: VolumeTag,
    data: Tensor,
}

impl FeatureVolume {
    pub fn new(tag: VolumeTag, data: Tensor) -> Result<Self> {
        match data.shape() {
            &[_, d, h, w] if d == h && h == w => Ok(Self { tag, data }),
            other => Err(Error::shape(format!("feature volume must be [C, g, g, g], found {other:?}"))),
        }
    }

    pub fn zeros(tag: VolumeTag, channels: usize, grid: usize) -> Self {
        Self {
            tag,
            data: Tensor::zeros(&[channels, grid, grid, grid]),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn with_tag(mut self, tag: VolumeTag) -> Self {
        self.tag = tag;
        self
    }

    /// `FVOL <tag> <C> <g>\n` followed by the f32 LE payload.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("FVOL {} {} {}\n", self.tag, self.channels(), self.grid()).into_bytes();
        for v in self.data.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::format("feature volume: missing header"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format("feature volume: bad header"))?;
        let parts: Vec<&str> = header.split(' ').collect();
        let ["FVOL", tag, c, g] = parts[..] else {
            return Err(Error::format(format!("feature volume: bad header `{header}`")));
        };
        let tag = VolumeTag::parse(tag).ok_or_else(|| Error::format(format!("unknown volume tag `{tag}`")))?;
        let c: usize = c.parse().map_err(|_| Error::format("feature volume: bad channel count"))?;
        let g: usize = g.parse().map_err(|_| Error::format("feature volume: bad grid size"))?;
        let payload = &bytes[nl + 1..];
        if payload.len() != c * g * g * g * 4 {
            return Err(Error::format(format!(
                "feature volume: payload is {} bytes, expected {}",
                payload.len(),
                c * g * g * g * 4
            )));
        }
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        Self::new(tag, Tensor::new(vec![c, g, g, g], data)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiPoolConfig {
    /// Grid resolution of the voxel path and of the final volumes.
    pub n: usize,
    /// Sub-voxel resolution of the point path; must equal `2 * n`.
    pub m: usize,
    pub grid_query_radius: f64,
    pub grid_query_k: usize,
    pub margin: f64,
}

impl Default for RoiPoolConfig {
    fn default() -> Self {
        Self {
            n: 6,
            m: 12,
            grid_query_radius: 0.8,
            grid_query_k: 16,
            margin: crate::geometry::DEFAULT_MARGIN,
        }
    }
}

impl RoiPoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m != 2 * self.n {
            return Err(Error::Invalid(format!("need n >= 1 and m = 2n, got n={} m={}", self.n, self.m)));
        }
        if !(self.grid_query_radius > 0.0) || self.grid_query_k == 0 || !(self.margin >= 0.0) {
            return Err(Error::Invalid(format!("invalid RoI pooling config {self:?}")));
        }
        Ok(())
    }
}

/// Cell centers of the uniform `n³` partition of the box, in world frame,
/// ordered x fastest, then y, then z (box-local axes).
pub fn roi_grid_points(bbox: &Box3D, n: usize) -> Vec<Vec3> {
    let dims = bbox.dims();
    let coord = |a: usize, i: usize| -dims[a] / 2.0 + (i as f64 + 0.5) * dims[a] / n as f64;
    let mut out = Vec::with_capacity(n * n * n);
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                out.push(bbox.to_world([coord(0, ix), coord(1, iy), coord(2, iz)]));
            }
        }
    }
    out
}

/// Voxel features prepared for repeated grid pooling.
#[derive(Debug, Clone)]
pub struct VoxelPooler {
    index: GridHashIndex,
    features: Vec<Vec<f64>>,
    channels: usize,
}

impl VoxelPooler {
    pub fn new(map: &SparseVoxelMap, radius: f64) -> Self {
        Self {
            index: build_index(&map.centers(), radius),
            features: map.iter().map(|(_, e)| e.feature.clone()).collect(),
            channels: map.channels(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pool(&self, bbox: &Box3D, cfg: &RoiPoolConfig) -> FeatureVolume {
        let n = cfg.n;
        let cells = n * n * n;
        let c = self.channels;
        let mut out = vec![0.0; c * cells];
        for (cell, gp) in roi_grid_points(bbox, n).iter().enumerate() {
            let hits = self.index.query(gp, cfg.grid_query_radius, cfg.grid_query_k);
            let found = hits.distinct();
            if found.is_empty() {
                continue;
            }
            let inv = 1.0 / found.len() as f64;
            for ch in 0..c {
                let s: f64 = found.iter().map(|&v| self.features[v][ch]).sum();
                out[ch * cells + cell] = s * inv;
            }
        }
        FeatureVolume::zeros(VolumeTag::VoxelPath, c, n).replace_data(out)
    }
}

impl FeatureVolume {
    fn replace_data(mut self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        self.data.data_mut().copy_from_slice(&data);
        self
    }
}

pub fn roi_grid_pool(map: &SparseVoxelMap, bbox: &Box3D, cfg: &RoiPoolConfig) -> FeatureVolume {
    VoxelPooler::new(map, cfg.grid_query_radius).pool(bbox, cfg)
}

/// Sub-voxel of a canonical coordinate along one axis, clamped into range.
#[inline]
pub fn sub_voxel_index(p: f64, dim: f64, m: usize) -> usize {
    let f = ((p + dim / 2.0) / (dim / m as f64)).floor();
    if f <= 0.0 {
        0
    } else {
        (f as usize).min(m - 1)
    }
}

/// Element-wise max of point embeddings per sub-voxel; empty cells are zero.
pub fn roi_aware_pool(canonical_positions: &[Vec3], embeddings: &Tensor, box_dims: Vec3, m: usize) -> Result<FeatureVolume> {
    let &[n, c] = embeddings.shape() else {
        return Err(Error::shape(format!("embeddings must be [N, C], found {:?}", embeddings.shape())));
    };
    if n != canonical_positions.len() {
        return Err(Error::shape(format!("{} positions for {n} embeddings", canonical_positions.len())));
    }
    let cells = m * m * m;
    let mut out = vec![f64::NEG_INFINITY; c * cells];
    let mut occupied = vec![false; cells];
    for (p, row) in canonical_positions.iter().zip(embeddings.data().chunks(c.max(1))) {
        let ix = sub_voxel_index(p[0], box_dims[0], m);
        let iy = sub_voxel_index(p[1], box_dims[1], m);
        let iz = sub_voxel_index(p[2], box_dims[2], m);
        let cell = ix + m * (iy + m * iz);
        occupied[cell] = true;
        for (ch, v) in row.iter().enumerate() {
            let slot = &mut out[ch * cells + cell];
            if *v > *slot {
                *slot = *v;
            }
        }
    }
    for (cell, occ) in occupied.iter().enumerate() {
        if !occ {
            for ch in 0..c {
                out[ch * cells + cell] = 0.0;
            }
        }
    }
    FeatureVolume::new(VolumeTag::PointPath, Tensor::new(vec![c, m, m, m], out)?)
}

#[derive(Debug, Clone)]
pub struct DownsampleWeights {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl DownsampleWeights {
    pub const KERNEL: &'static str = "roi.downsample.W";
    pub const BIAS: &'static str = "roi.downsample.b";

    pub fn manifest(c_in: usize, c_out: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(Self::KERNEL, &[c_out, c_in, 2, 2, 2]),
            ParamSpec::with_fan_in(Self::BIAS, &[c_out], c_in * 8),
        ]
    }

    pub fn from_bundle(bundle: &WeightBundle, c_in: usize) -> Result<Self> {
        let kernel = bundle.get(Self::KERNEL)?;
        let c_out = kernel.shape().first().copied().unwrap_or(0);
        Ok(Self {
            kernel: bundle.get_shaped(Self::KERNEL, &[c_out, c_in, 2, 2, 2])?.clone(),
            bias: bundle.get_shaped(Self::BIAS, &[c_out])?.clone(),
        })
    }
}

/// Stride-2 `2×2×2` convolution plus ReLU: `m³ → (m/2)³`.
pub fn downsample_volume(v: &FeatureVolume, weights: &DownsampleWeights) -> Result<FeatureVolume> {
    if !v.grid().is_multiple_of(2) {
        return Err(Error::shape(format!("cannot halve an odd grid of {}", v.grid())));
    }
    let k = weights.kernel.shape();
    if k.len() != 5 || k[2..] != [2, 2, 2] {
        return Err(Error::shape(format!("downsample kernel must be [Co, Ci, 2, 2, 2], found {k:?}")));
    }
    let y = conv3d_forward(&weights.kernel, &weights.bias, v.tensor(), 2, 0)?;
    FeatureVolume::new(v.tag, crate::nn::relu(&y))
}

/// Everything the point path needs besides the points themselves.
#[derive(Debug, Clone)]
pub struct PointPath {
    pub gfe: PointGFEConfig,
    pub gfe_weights: PointGFEWeights,
    pub down: DownsampleWeights,
}

impl PointPath {
    pub fn from_bundle(bundle: &WeightBundle, gfe: &PointGFEConfig) -> Result<Self> {
        gfe.validate()?;
        Ok(Self {
            gfe: gfe.clone(),
            gfe_weights: PointGFEWeights::from_bundle(bundle, gfe, 5)?,
            down: DownsampleWeights::from_bundle(bundle, gfe.output_width())?,
        })
    }

    pub fn embedding_width(&self) -> usize {
        self.gfe.output_width()
    }

    pub fn output_channels(&self) -> usize {
        self.down.kernel.shape()[0]
    }

    /// Crop → canonicalize → encode → aware pool → downsample.
    ///
    /// `attributes` are the per-point channels after the coordinates (e.g.
    /// reflectance and depth prior), shape `[N, 2]`. The encoder sees
    /// canonical coordinates followed by these attributes.
    pub fn run(&self, positions: &[Vec3], attributes: &Tensor, bbox: &Box3D, cfg: &RoiPoolConfig) -> Result<FeatureVolume> {
        Ok(self.run_detailed(positions, attributes, bbox, cfg)?.0)
    }

    /// Like [`PointPath::run`], also returning the number of cropped points.
    pub fn run_detailed(
        &self,
        positions: &[Vec3],
        attributes: &Tensor,
        bbox: &Box3D,
        cfg: &RoiPoolConfig,
    ) -> Result<(FeatureVolume, usize)> {
        let stages = self.crop_and_encode(positions, attributes, bbox, cfg)?;
        let Some((canonical, embedding)) = stages else {
            return Ok((FeatureVolume::zeros(VolumeTag::PointPath, self.output_channels(), cfg.n), 0));
        };
        let count = canonical.len();
        let pooled = roi_aware_pool(&canonical, &embedding, bbox.dims(), cfg.m)?;
        Ok((downsample_volume(&pooled, &self.down)?, count))
    }

    /// Crops and encodes the points of one box; `None` when the box is empty.
    pub fn crop_and_encode(
        &self,
        positions: &[Vec3],
        attributes: &Tensor,
        bbox: &Box3D,
        cfg: &RoiPoolConfig,
    ) -> Result<Option<(Vec<Vec3>, Tensor)>> {
        let &[n, a] = attributes.shape() else {
            return Err(Error::shape(format!("attributes must be [N, A], found {:?}", attributes.shape())));
        };
        if n != positions.len() || a + 3 != self.gfe_weights.stages[0].input_width() {
            return Err(Error::shape(format!(
                "attributes {:?} do not fit {} points and encoder input width {}",
                attributes.shape(),
                positions.len(),
                self.gfe_weights.stages[0].input_width()
            )));
        }
        let mut canonical = Vec::new();
        let mut feats = Vec::new();
        for (i, p) in positions.iter().enumerate() {
            if bbox.contains(*p, cfg.margin) {
                let q = bbox.to_local(*p);
                canonical.push(q);
                feats.extend_from_slice(&q);
                feats.extend_from_slice(&attributes.data()[i * a..(i + 1) * a]);
            }
        }
        if canonical.is_empty() {
            return Ok(None);
        }
        let feats = Tensor::new(vec![canonical.len(), a + 3], feats)?;
        let embedding = encode_points(&canonical, &feats, &self.gfe, &self.gfe_weights)?;
        Ok(Some((canonical, embedding)))
    }
}

/// Splits augmented points into positions and `[N, 2]` (r, d) attributes.
pub fn split_points(points: &[Point5]) -> (Vec<Vec3>, Tensor) {
    let positions = points.iter().map(Point5::position).collect();
    let attrs = points.iter().flat_map(|p| [p.r as f64, p.d_da as f64]).collect();
    (positions, Tensor::new(vec![points.len(), 2], attrs).expect("finite attributes"))
}

/// Aligned voxel-path and point-path volumes for one box.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeatures {
    pub voxel: FeatureVolume,
    pub point: FeatureVolume,
    /// Points cropped into the enlarged box.
    pub point_count: usize,
}

/// Shared, read-only state for per-box extraction.
#[derive(Debug, Clone)]
pub struct RoiExtractor {
    pub cfg: RoiPoolConfig,
    pub pooler: VoxelPooler,
    pub point_path: PointPath,
    positions: Vec<Vec3>,
    attributes: Tensor,
}

impl RoiExtractor {
    pub fn new(
        points: &[Point5],
        map: &SparseVoxelMap,
        bundle: &WeightBundle,
        cfg: &RoiPoolConfig,
        gfe: &PointGFEConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let (positions, attributes) = split_points(points);
        Ok(Self {
            cfg: cfg.clone(),
            pooler: VoxelPooler::new(map, cfg.grid_query_radius),
            point_path: PointPath::from_bundle(bundle, gfe)?,
            positions,
            attributes,
        })
    }

    pub fn extract(&self, bbox: &Box3D) -> Result<RoiFeatures> {
        let voxel = self.pooler.pool(bbox, &self.cfg);
        let (point, point_count) = self.point_path.run_detailed(&self.positions, &self.attributes, bbox, &self.cfg)?;
        if point_count == 0 {
            debug!("box at {:?} holds no points; point volume is zero", bbox.center());
        }
        Ok(RoiFeatures {
            voxel,
            point,
            point_count,
        })
    }
}

pub fn extract_roi_features(
    points: &[Point5],
    map: &SparseVoxelMap,
    boxes: &[Box3D],
    bundle: &WeightBundle,
    cfg: &RoiPoolConfig,
    gfe: &PointGFEConfig,
) -> Result<Vec<RoiFeatures>> {
    let extractor = RoiExtractor::new(points, map, bundle, cfg, gfe)?;
    boxes.iter().map(|b| extractor.extract(b)).collect()
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;
    use std::f64::consts::FRAC_PI_2;

    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::seeded_init;
    use crate::pointgfe::pointgfe_manifest;
    use crate::voxelgrid::{voxelize, GridSpec};

    fn close(a: Vec3, b: Vec3) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn grid_points_unit_cube() {
        let b = Box3D::new([0.0; 3], [1.0; 3], 0.0).unwrap();
        let pts = roi_grid_points(&b, 2);
        assert_eq!(pts.len(), 8);
        assert!(close(pts[0], [-0.25, -0.25, -0.25]));
        assert!(close(pts[1], [0.25, -0.25, -0.25]));
        assert!(close(pts[2], [-0.25, 0.25, -0.25]));
        assert!(close(pts[7], [0.25, 0.25, 0.25]));
        let c = Box3D::new([1.0, 2.0, 3.0], [2.0, 1.0, 4.0], 0.7).unwrap();
        assert!(close(roi_grid_points(&c, 1)[0], [1.0, 2.0, 3.0]));
    }

    #[test]
    fn grid_points_rotated() {
        let flat = Box3D::new([0.0; 3], [2.0, 1.0, 1.0], 0.0).unwrap();
        let turned = Box3D::new([0.0; 3], [2.0, 1.0, 1.0], FRAC_PI_2).unwrap();
        // Rz(π/2): (x, y) -> (-y, x)
        for (a, b) in roi_grid_points(&flat, 3).iter().zip(roi_grid_points(&turned, 3)) {
            assert!(close([-a[1], a[0], a[2]], b));
        }
    }

    fn one_voxel_map(center_key: [usize; 3], feature: Vec<f64>) -> SparseVoxelMap {
        let spec = GridSpec::new([-5.0, -5.0, -5.0], [0.5, 0.5, 0.5], [20, 20, 20]).unwrap();
        let mut map = SparseVoxelMap::empty(spec, feature.len());
        map.set_feature(center_key, feature).unwrap();
        map
    }

    #[test]
    fn grid_pool_single_voxel() {
        // Voxel (10,10,10) is centered at (0.25, 0.25, 0.25): the first grid
        // point of a 2x2x2 box spanning [-0.5, 1.0]³... use n=2 on a box whose
        // (0,0,0) cell center is exactly there.
        let map = one_voxel_map([10, 10, 10], vec![1.0, 2.0, 3.0]);
        let b = Box3D::new([0.5, 0.5, 0.5], [1.0, 1.0, 1.0], 0.0).unwrap();
        let cfg = RoiPoolConfig {
            n: 2,
            m: 4,
            grid_query_radius: 0.2,
            ..Default::default()
        };
        let v = roi_grid_pool(&map, &b, &cfg);
        assert_eq!(v.tensor().shape(), &[3, 2, 2, 2]);
        for ch in 0..3 {
            for cell in 0..8 {
                let expect = if cell == 0 { (ch + 1) as f64 } else { 0.0 };
                assert_eq!(v.tensor().data()[ch * 8 + cell], expect);
            }
        }
    }

    #[test]
    fn grid_pool_empty_map() {
        let map = SparseVoxelMap::empty(GridSpec::default(), 5);
        let b = Box3D::new([10.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.3).unwrap();
        let v = roi_grid_pool(&map, &b, &RoiPoolConfig::default());
        assert_eq!(v.tensor().shape(), &[5, 6, 6, 6]);
        assert!(v.tensor().data().iter().all(|x| *x == 0.0));
    }

    /// Per-grid-point scan over all voxels in key order.
    fn grid_pool_oracle(map: &SparseVoxelMap, b: &Box3D, cfg: &RoiPoolConfig) -> Vec<f64> {
        let n3 = cfg.n.pow(3);
        let c = map.channels();
        let mut out = vec![0.0; c * n3];
        for (cell, gp) in roi_grid_points(b, cfg.n).iter().enumerate() {
            let mut members = Vec::new();
            for (_, e) in map.iter() {
                let d2: f64 = (0..3).map(|a| (e.center[a] - gp[a]).powi(2)).sum();
                if d2 <= cfg.grid_query_radius * cfg.grid_query_radius && members.len() < cfg.grid_query_k {
                    members.push(e.feature.clone());
                }
            }
            for ch in 0..c {
                if !members.is_empty() {
                    out[ch * n3 + cell] = members.iter().map(|f| f[ch]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        out
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point5> {
        (0..n)
            .map(|_| Point5 {
                x: rng.gen_range(0.0..8.0),
                y: rng.gen_range(-4.0..4.0),
                z: rng.gen_range(-1.5..1.0),
                r: rng.gen_range(0.0..1.0),
                d_da: rng.gen_range(0.0..40.0),
            })
            .collect()
    }

    fn coarse_spec() -> GridSpec {
        GridSpec::new([0.0, -4.0, -2.0], [0.4, 0.4, 0.4], [20, 20, 8]).unwrap()
    }

    #[test]
    fn grid_pool_matches_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let map = voxelize(&random_scene(&mut rng, 2000), &coarse_spec());
        let cfg = RoiPoolConfig::default();
        for _ in 0..10 {
            let b = Box3D::new(
                [rng.gen_range(1.0..7.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..0.5)],
                [rng.gen_range(1.0..4.5), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)],
                rng.gen_range(-3.0..3.0),
            )
            .unwrap();
            let v = roi_grid_pool(&map, &b, &cfg);
            let oracle = grid_pool_oracle(&map, &b, &cfg);
            for (a, o) in v.tensor().data().iter().zip(&oracle) {
                assert!((a - o).abs() <= 1e-6 * o.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn grid_pool_ignores_far_voxels() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let map = voxelize(&random_scene(&mut rng, 1500), &coarse_spec());
        let cfg = RoiPoolConfig::default();
        let b = Box3D::new([4.0, 0.0, -0.5], [3.0, 1.6, 1.2], 0.4).unwrap();
        let v = roi_grid_pool(&map, &b, &cfg);
        let grid = roi_grid_points(&b, cfg.n);
        let target = 100;
        let gp = grid[target];
        let mut pruned = SparseVoxelMap::empty(map.spec().clone(), map.channels());
        for (k, e) in map.iter() {
            let d2: f64 = (0..3).map(|a| (e.center[a] - gp[a]).powi(2)).sum();
            if d2 <= 0.64 {
                pruned.set_feature(*k, e.feature.clone()).unwrap();
            }
        }
        let w = roi_grid_pool(&pruned, &b, &cfg);
        for ch in 0..map.channels() {
            assert_eq!(v.tensor().data()[ch * 216 + target], w.tensor().data()[ch * 216 + target]);
        }
    }

    #[test]
    fn aware_pool_examples() {
        let dims = [2.0, 2.0, 2.0];
        let pos = vec![[-0.9, -0.9, -0.9], [0.9, 0.9, 0.9]];
        let emb = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = roi_aware_pool(&pos, &emb, dims, 2).unwrap();
        let d = v.tensor().data();
        assert_eq!((d[0], d[7], d[8], d[15]), (1.0, 3.0, 2.0, 4.0));
        assert_eq!(d.iter().filter(|x| **x != 0.0).count(), 4);

        let pos = vec![[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]];
        let emb = Tensor::new(vec![2, 3], vec![1.0, 5.0, 0.0, 3.0, 2.0, -1.0]).unwrap();
        let v = roi_aware_pool(&pos, &emb, dims, 2).unwrap();
        assert_eq!([v.tensor().data()[7], v.tensor().data()[15], v.tensor().data()[23]], [3.0, 5.0, 0.0]);
    }

    #[test]
    fn margin_points_clamp_to_boundary_cells() {
        let dims = [4.0, 2.0, 2.0];
        assert_eq!(sub_voxel_index(-2.2, 4.0, 12), 0);
        assert_eq!(sub_voxel_index(2.2, 4.0, 12), 11);
        assert_eq!(sub_voxel_index(2.0, 4.0, 12), 11);
        let emb = Tensor::new(vec![1, 1], vec![7.0]).unwrap();
        let v = roi_aware_pool(&[[2.2, 1.15, -1.1]], &emb, dims, 12).unwrap();
        assert_eq!(v.tensor().data()[11 + 12 * 11], 7.0);
    }

    #[test]
    fn aware_pool_matches_grouping_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let dims = [4.0, 1.8, 1.6];
        let pos: Vec<Vec3> = (0..200)
            .map(|_| [rng.gen_range(-2.2..2.2), rng.gen_range(-1.1..1.1), rng.gen_range(-1.0..1.0)])
            .collect();
        let emb = Tensor::from_fn(&[200, 4], |_| rng.gen_range(-1.0..3.0));
        let v = roi_aware_pool(&pos, &emb, dims, 12).unwrap();

        let mut groups: HashMap<(usize, usize, usize), Vec<usize>> = HashMap::new();
        for (i, p) in pos.iter().enumerate() {
            let idx = |a: usize| {
                let s = dims[a] / 12.0;
                (((p[a] + dims[a] / 2.0) / s).floor().max(0.0) as usize).min(11)
            };
            groups.entry((idx(0), idx(1), idx(2))).or_default().push(i);
        }
        for iz in 0..12 {
            for iy in 0..12 {
                for ix in 0..12 {
                    for ch in 0..4 {
                        let expect = groups.get(&(ix, iy, iz)).map_or(0.0, |m| {
                            m.iter().map(|&i| emb.data()[i * 4 + ch]).fold(f64::NEG_INFINITY, f64::max)
                        });
                        assert_eq!(v.tensor().data()[ch * 1728 + ix + 12 * (iy + 12 * iz)], expect);
                    }
                }
            }
        }

        let mut order: Vec<usize> = (0..200).collect();
        order.shuffle(&mut rng);
        let pos2: Vec<Vec3> = order.iter().map(|&i| pos[i]).collect();
        let emb2 = Tensor::new(vec![200, 4], order.iter().flat_map(|&i| emb.data()[i * 4..i * 4 + 4].to_vec()).collect()).unwrap();
        assert_eq!(roi_aware_pool(&pos2, &emb2, dims, 12).unwrap(), v);
    }

    #[test]
    fn downsample_examples() {
        let v = FeatureVolume::new(VolumeTag::PointPath, Tensor::full(&[2, 12, 12, 12], 3.0)).unwrap();
        let mut kernel = Tensor::zeros(&[2, 2, 2, 2, 2]);
        for o in 0..2 {
            for t in 0..8 {
                kernel.data_mut()[(o * 2 + o) * 8 + t] = 0.125;
            }
        }
        let w = DownsampleWeights { kernel, bias: Tensor::zeros(&[2]) };
        let out = downsample_volume(&v, &w).unwrap();
        assert_eq!(out.tensor().shape(), &[2, 6, 6, 6]);
        assert!(out.tensor().data().iter().all(|x| (x - 3.0).abs() < 1e-12));

        let w = DownsampleWeights {
            kernel: Tensor::zeros(&[2, 2, 2, 2, 2]),
            bias: Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(),
        };
        let out = downsample_volume(&v, &w).unwrap();
        assert!(out.tensor().data()[..216].iter().all(|x| *x == 0.5));
        assert!(out.tensor().data()[216..].iter().all(|x| *x == 0.0));

        let bad = DownsampleWeights { kernel: Tensor::zeros(&[2, 3, 2, 2, 2]), bias: Tensor::zeros(&[2]) };
        assert!(matches!(downsample_volume(&v, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn downsample_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let v = FeatureVolume::new(VolumeTag::PointPath, Tensor::from_fn(&[3, 12, 12, 12], |_| rng.gen_range(-1.0..1.0))).unwrap();
        let w = DownsampleWeights {
            kernel: Tensor::from_fn(&[2, 3, 2, 2, 2], |_| rng.gen_range(-1.0..1.0)),
            bias: Tensor::from_fn(&[2], |_| rng.gen_range(-0.1..0.1)),
        };
        let out = downsample_volume(&v, &w).unwrap();
        let x = v.tensor().data();
        for o in 0..2 {
            for z in 0..6 {
                for y in 0..6 {
                    for xx in 0..6 {
                        let mut acc = w.bias.data()[o];
                        for c in 0..3 {
                            for a in 0..2 {
                                for b in 0..2 {
                                    for d in 0..2 {
                                        acc += w.kernel.data()[(((o * 3 + c) * 2 + a) * 2 + b) * 2 + d]
                                            * x[((c * 12 + 2 * z + a) * 12 + 2 * y + b) * 12 + 2 * xx + d];
                                    }
                                }
                            }
                        }
                        let got = out.tensor().data()[((o * 6 + z) * 6 + y) * 6 + xx];
                        assert!((got - acc.max(0.0)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    fn small_bundle(gfe: &PointGFEConfig, seed: u64) -> WeightBundle {
        let mut m = pointgfe_manifest(gfe, 5);
        m.extend(DownsampleWeights::manifest(gfe.output_width(), gfe.output_width()));
        seeded_init(seed, &m)
    }

    #[test]
    fn empty_box_gives_zero_point_volume() {
        let gfe = PointGFEConfig::default();
        let bundle = small_bundle(&gfe, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let pts = random_scene(&mut rng, 300);
        let map = voxelize(&pts, &coarse_spec());
        let far = Box3D::new([30.0, 30.0, 0.0], [4.0, 2.0, 1.5], 0.0).unwrap();
        let feats = extract_roi_features(&pts, &map, &[far], &bundle, &RoiPoolConfig::default(), &gfe).unwrap();
        assert_eq!(feats[0].point_count, 0);
        assert_eq!(feats[0].point.tensor().shape(), &[128, 6, 6, 6]);
        assert!(feats[0].point.tensor().data().iter().all(|x| *x == 0.0));
        assert_eq!(feats[0].voxel.tensor().shape(), &[5, 6, 6, 6]);
    }

    #[test]
    fn single_point_box_composes_oracles() {
        let gfe = PointGFEConfig::default();
        let bundle = small_bundle(&gfe, 2);
        let p = Point5 { x: 5.3, y: 0.4, z: -0.2, r: 0.2, d_da: 9.0 };
        let b = Box3D::new([5.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.3).unwrap();
        let map = voxelize(&[p], &coarse_spec());
        let cfg = RoiPoolConfig::default();
        let got = &extract_roi_features(&[p], &map, &[b], &bundle, &cfg, &gfe).unwrap()[0];
        assert_eq!(got.point_count, 1);

        // Encoder on the lone canonical point, its embedding placed in one
        // sub-voxel, then the downsampler.
        let q = b.to_local(p.position());
        let lone = [Point5 { x: q[0] as f32, y: q[1] as f32, z: q[2] as f32, ..p }];
        let feats = Tensor::new(vec![1, 5], vec![q[0], q[1], q[2], p.r as f64, p.d_da as f64]).unwrap();
        let path = PointPath::from_bundle(&bundle, &gfe).unwrap();
        let emb = encode_points(&[q], &feats, &gfe, &path.gfe_weights).unwrap();
        let pooled = roi_aware_pool(&[q], &emb, b.dims(), 12).unwrap();
        let nonzero_cells = (0..1728).filter(|&c| (0..128).any(|ch| pooled.tensor().data()[ch * 1728 + c] != 0.0)).count();
        assert!(nonzero_cells <= 1);
        let expect = downsample_volume(&pooled, &path.down).unwrap();
        assert_eq!(got.point, expect);
        assert_eq!(lone.len(), 1);
    }

    #[test]
    fn volume_dump_round_trip() {
        let v = FeatureVolume::new(VolumeTag::Fused, Tensor::from_fn(&[2, 3, 3, 3], |i| i as f64 * 0.5)).unwrap();
        let bytes = v.encode();
        assert!(bytes.starts_with(b"FVOL fused 2 3\n"));
        assert_eq!(FeatureVolume::decode(&bytes).unwrap(), v);
        assert!(FeatureVolume::decode(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn config_requires_m_equals_2n() {
        let cfg = RoiPoolConfig { m: 10, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(RoiPoolConfig::default().validate().is_ok());
    }
}
