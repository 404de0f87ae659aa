//! Sparse voxelization of augmented point clouds.
//!
//! The per-voxel mean of the 5D point features stands in for the output of
//! a sparse convolutional backbone. Precomputed features of any width can be
//! swapped in through [`load_voxel_features`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use crate::depth_prior::Point5;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub type VoxelKey = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub origin: Vec3,
    pub voxel_size: Vec3,
    pub extent: [usize; 3],
}

impl Default for GridSpec {
    /// KITTI front-view range: x ∈ [0, 70.4], y ∈ [-40, 40], z ∈ [-3, 1].
    fn default() -> Self {
        Self {
            origin: [0.0, -40.0, -3.0],
            voxel_size: [0.05, 0.05, 0.1],
            extent: [1408, 1600, 40],
        }
    }
}

impl GridSpec {
    pub fn new(origin: Vec3, voxel_size: Vec3, extent: [usize; 3]) -> Result<Self> {
        let spec = Self {
            origin,
            voxel_size,
            extent,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxel_size.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!("voxel size must be positive, got {:?}", self.voxel_size)));
        }
        if self.extent.contains(&0) {
            return Err(Error::Invalid(format!("grid extent must be >= 1, got {:?}", self.extent)));
        }
        Ok(())
    }

    /// Voxel containing `p`, or `None` outside the grid. Lower faces belong
    /// to the voxel.
    pub fn voxel_of(&self, p: Vec3) -> Option<VoxelKey> {
        let mut key = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size[a]).floor();
            if !(f >= 0.0 && f < self.extent[a] as f64) {
                return None;
            }
            key[a] = f as usize;
        }
        Some(key)
    }

    pub fn contains_key(&self, key: &VoxelKey) -> bool {
        key.iter().zip(self.extent.iter()).all(|(k, e)| k < e)
    }

    pub fn voxel_center(&self, key: &VoxelKey) -> Vec3 {
        [0, 1, 2].map(|a| self.origin[a] + (key[a] as f64 + 0.5) * self.voxel_size[a])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelEntry {
    pub feature: Vec<f64>,
    pub center: Vec3,
    /// Number of points averaged into this voxel (0 for loaded-only voxels).
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelMap {
    spec: GridSpec,
    channels: usize,
    entries: BTreeMap<VoxelKey, VoxelEntry>,
    dropped: usize,
}

impl SparseVoxelMap {
    pub fn empty(spec: GridSpec, channels: usize) -> Self {
        Self {
            spec,
            channels,
            entries: BTreeMap::new(),
            dropped: 0,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Points that fell outside the grid during voxelization.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&VoxelEntry> {
        self.entries.get(key)
    }

    /// Entries in ascending key order; this order defines voxel indices.
    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &VoxelEntry)> {
        self.entries.iter()
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.entries.values().map(|e| e.center).collect()
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.entries.values().map(|e| e.feature.as_slice()).collect()
    }

    /// Inserts or replaces one voxel feature.
    pub fn set_feature(&mut self, key: VoxelKey, feature: Vec<f64>) -> Result<()> {
        if !self.spec.contains_key(&key) {
            return Err(Error::format(format!("voxel {key:?} is outside extent {:?}", self.spec.extent)));
        }
        if feature.len() != self.channels {
            return Err(Error::format(format!(
                "voxel {key:?} has {} channels, map has {}",
                feature.len(),
                self.channels
            )));
        }
        let center = self.spec.voxel_center(&key);
        self.entries
            .entry(key)
            .and_modify(|e| e.feature = feature.clone())
            .or_insert(VoxelEntry {
                feature,
                center,
                count: 0,
            });
        Ok(())
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub const POINT_CHANNELS: usize = 5;

pub fn voxelize(points: &[Point5], spec: &GridSpec) -> SparseVoxelMap {
    let mut sums: BTreeMap<VoxelKey, ([CompensatedSum; POINT_CHANNELS], usize)> = BTreeMap::new();
    let mut dropped = 0;
    for p in points {
        match spec.voxel_of(p.position()) {
            Some(key) => {
                let slot = sums.entry(key).or_default();
                for (acc, v) in slot.0.iter_mut().zip(p.features()) {
                    acc.add(v as f64);
                }
                slot.1 += 1;
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        warn!("voxelize: {dropped} of {} points outside the grid were dropped", points.len());
    }
    let entries = sums
        .into_iter()
        .map(|(key, (acc, count))| {
            let feature = acc.iter().map(|s| s.value() / count as f64).collect();
            (
                key,
                VoxelEntry {
                    feature,
                    center: spec.voxel_center(&key),
                    count,
                },
            )
        })
        .collect();
    SparseVoxelMap {
        spec: spec.clone(),
        channels: POINT_CHANNELS,
        entries,
        dropped,
    }
}

/// Parses `ix iy iz f_1 ... f_C` lines into `(key, feature)` records.
pub fn parse_voxel_features(text: &str) -> Result<Vec<(VoxelKey, Vec<f64>)>> {
    let mut records = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        let err = |msg: String| Error::format(format!("voxel features line {}: {msg}", lineno + 1));
        if cols.len() < 4 {
            return Err(err("need three coordinates and at least one feature".into()));
        }
        let mut key = [0usize; 3];
        for a in 0..3 {
            key[a] = cols[a].parse().map_err(|_| err(format!("bad coordinate `{}`", cols[a])))?;
        }
        let feature = cols[3..]
            .iter()
            .map(|t| match t.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(format!("bad feature value `{t}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        match width {
            None => width = Some(feature.len()),
            Some(c) if c != feature.len() => {
                return Err(err(format!("mixed channel counts: {c} then {}", feature.len())));
            }
            _ => {}
        }
        records.push((key, feature));
    }
    Ok(records)
}

pub fn format_voxel_features(records: &[(VoxelKey, Vec<f64>)]) -> String {
    let mut s = String::new();
    for (k, f) in records {
        let _ = write!(s, "{} {} {}", k[0], k[1], k[2]);
        for v in f {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
    }
    s
}

/// Applies feature records to a map.
///
/// When the records carry a different channel count than the map, voxels
/// that the records do not mention are reset to zero vectors of the new
/// width.
pub fn apply_voxel_features(mut map: SparseVoxelMap, records: Vec<(VoxelKey, Vec<f64>)>) -> Result<SparseVoxelMap> {
    let Some(width) = records.first().map(|r| r.1.len()) else {
        return Ok(map);
    };
    for (key, _) in &records {
        if !map.spec.contains_key(key) {
            return Err(Error::format(format!("voxel {key:?} is outside extent {:?}", map.spec.extent)));
        }
    }
    if width != map.channels {
        map.channels = width;
        for e in map.entries.values_mut() {
            e.feature = vec![0.0; width];
        }
    }
    for (key, feature) in records {
        map.set_feature(key, feature)?;
    }
    Ok(map)
}

pub fn load_voxel_features(map: SparseVoxelMap, features_path: impl AsRef<Path>) -> Result<SparseVoxelMap> {
    let path = features_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    apply_voxel_features(map, parse_voxel_features(&text)?)
}
