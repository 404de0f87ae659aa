//! Point-wise local geometry encoder.
//!
//! Each stage pairs a point's feature vector with the offset to each of its
//! `k` ball-query neighbors, runs the pair through a two-layer MLP
//! (Linear → ReLU → Linear → ReLU) and max-pools over the neighbor slots.
//! Three stages are chained and their outputs concatenated.
//!
//! Weights are read from a [`WeightBundle`] under
//! `gfe.stage{1,2,3}.{W1,b1,W2,b2}`.

use crate::depth_prior::Point5;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::nn::{ParamSpec, Tensor, WeightBundle};
use crate::spatial_index::build_index;

pub const STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PointGFEConfig {
    pub radius: f64,
    pub k: usize,
    pub stage_widths: [usize; STAGES],
}

impl Default for PointGFEConfig {
    fn default() -> Self {
        Self {
            radius: 0.8,
            k: 9,
            stage_widths: [32, 32, 64],
        }
    }
}

impl PointGFEConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || self.k == 0 || self.stage_widths.contains(&0) {
            return Err(Error::Invalid(format!("invalid PointGFE config {self:?}")));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.stage_widths.iter().sum()
    }

    pub fn stage_input_width(&self, stage: usize, in_channels: usize) -> usize {
        if stage == 0 {
            in_channels
        } else {
            self.stage_widths[stage - 1]
        }
    }
}

/// Per-point embeddings, shape `[N, sum(stage_widths)]`.
pub type PointEmbedding = Tensor;

#[derive(Debug, Clone)]
pub struct StageWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl StageWeights {
    pub fn input_width(&self) -> usize {
        self.w1.shape()[1] - 3
    }

    pub fn output_width(&self) -> usize {
        self.w2.shape()[0]
    }
}

fn stage_prefix(stage: usize) -> String {
    format!("gfe.stage{}", stage + 1)
}

/// Initialization manifest for all three stages.
pub fn pointgfe_manifest(cfg: &PointGFEConfig, in_channels: usize) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for s in 0..STAGES {
        let p = stage_prefix(s);
        let cin = cfg.stage_input_width(s, in_channels) + 3;
        let cout = cfg.stage_widths[s];
        out.push(ParamSpec::new(format!("{p}.W1"), &[cout, cin]));
        out.push(ParamSpec::with_fan_in(format!("{p}.b1"), &[cout], cin));
        out.push(ParamSpec::new(format!("{p}.W2"), &[cout, cout]));
        out.push(ParamSpec::with_fan_in(format!("{p}.b2"), &[cout], cout));
    }
    out
}

/// Validated weights for the three stages.
#[derive(Debug, Clone)]
pub struct PointGFEWeights {
    pub stages: Vec<StageWeights>,
}

impl PointGFEWeights {
    pub fn from_bundle(bundle: &WeightBundle, cfg: &PointGFEConfig, in_channels: usize) -> Result<Self> {
        let stages = (0..STAGES)
            .map(|s| {
                let p = stage_prefix(s);
                let cin = cfg.stage_input_width(s, in_channels) + 3;
                let cout = cfg.stage_widths[s];
                Ok(StageWeights {
                    w1: bundle.get_shaped(&format!("{p}.W1"), &[cout, cin])?.clone(),
                    b1: bundle.get_shaped(&format!("{p}.b1"), &[cout])?.clone(),
                    w2: bundle.get_shaped(&format!("{p}.W2"), &[cout, cout])?.clone(),
                    b2: bundle.get_shaped(&format!("{p}.b2"), &[cout])?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stages })
    }
}

/// Ball-query neighborhoods (`k` slots per point) over a point set.
pub fn neighborhoods(positions: &[Vec3], radius: f64, k: usize) -> Vec<Vec<usize>> {
    let index = build_index(positions, radius);
    positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let n = index.query(p, radius, k);
            if n.is_empty() {
                vec![i; k]
            } else {
                n.indices().to_vec()
            }
        })
        .collect()
}

/// Offsets `position[neighbor] - position[i]`, shape `[N, k, 3]`.
pub fn encode_local_geometry(positions: &[Vec3], neighbor_indices: &[Vec<usize>]) -> Result<Tensor> {
    let n = positions.len();
    if neighbor_indices.len() != n {
        return Err(Error::shape(format!("{} neighbor lists for {n} points", neighbor_indices.len())));
    }
    let k = neighbor_indices.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(n * k * 3);
    for (i, nbrs) in neighbor_indices.iter().enumerate() {
        if nbrs.len() != k {
            return Err(Error::shape(format!("point {i} has {} neighbors, expected {k}", nbrs.len())));
        }
        for &j in nbrs {
            let q = positions.get(j).ok_or(Error::Index { index: j, len: n })?;
            data.extend((0..3).map(|a| q[a] - positions[i][a]));
        }
    }
    Tensor::new(vec![n, k, 3], data)
}

/// One encoder stage: `[N, Cin]` features and `[N, k, 3]` offsets to `[N, Cout]`.
pub fn pointgfe_stage(point_feats: &Tensor, offsets: &Tensor, w: &StageWeights) -> Result<Tensor> {
    let &[n, cin] = point_feats.shape() else {
        return Err(Error::shape(format!("point features must be [N, C], found {:?}", point_feats.shape())));
    };
    let &[n2, k, 3] = offsets.shape() else {
        return Err(Error::shape(format!("offsets must be [N, k, 3], found {:?}", offsets.shape())));
    };
    if n != n2 {
        return Err(Error::shape(format!("{n} feature rows but {n2} offset rows")));
    }
    let cout = w.output_width();
    if w.w1.shape() != [cout, cin + 3] || w.b1.shape() != [cout] || w.w2.shape() != [cout, cout] || w.b2.shape() != [cout] {
        return Err(Error::shape(format!(
            "stage weights do not fit input width {cin}: W1 {:?}, W2 {:?}",
            w.w1.shape(),
            w.w2.shape()
        )));
    }
    let w1 = w.w1.data();
    let w2 = w.w2.data();
    let feats = point_feats.data();
    let offs = offsets.data();
    let mut out = vec![0.0; n * cout];
    let mut base = vec![0.0; cout];
    let mut hidden = vec![0.0; cout];
    for i in 0..n {
        // The feature half of the first layer is shared by all k slots.
        let f = &feats[i * cin..(i + 1) * cin];
        for (o, b) in base.iter_mut().enumerate() {
            let row = &w1[o * (cin + 3)..o * (cin + 3) + cin];
            *b = w.b1.data()[o] + row.iter().zip(f).map(|(a, c)| a * c).sum::<f64>();
        }
        let row_out = &mut out[i * cout..(i + 1) * cout];
        row_out.fill(f64::NEG_INFINITY);
        for j in 0..k {
            let d = &offs[(i * k + j) * 3..(i * k + j) * 3 + 3];
            for (o, h) in hidden.iter_mut().enumerate() {
                let g = &w1[o * (cin + 3) + cin..(o + 1) * (cin + 3)];
                *h = (base[o] + g[0] * d[0] + g[1] * d[1] + g[2] * d[2]).max(0.0);
            }
            for (o, slot) in row_out.iter_mut().enumerate() {
                let r = &w2[o * cout..(o + 1) * cout];
                let v = (w.b2.data()[o] + r.iter().zip(&hidden).map(|(a, c)| a * c).sum::<f64>()).max(0.0);
                if v > *slot {
                    *slot = v;
                }
            }
        }
        if k == 0 {
            row_out.fill(0.0);
        }
    }
    Tensor::new(vec![n, cout], out)
}

/// Runs the three stages over a point set given as positions plus `[N, C]`
/// input features. Neighborhoods are computed once and shared by all stages.
pub fn encode_points(
    positions: &[Vec3],
    features: &Tensor,
    cfg: &PointGFEConfig,
    weights: &PointGFEWeights,
) -> Result<PointEmbedding> {
    let n = positions.len();
    if features.shape().first() != Some(&n) || features.shape().len() != 2 {
        return Err(Error::shape(format!("features {:?} do not match {n} points", features.shape())));
    }
    let width = cfg.output_width();
    if n == 0 {
        return Ok(Tensor::zeros(&[0, width]));
    }
    let nbrs = neighborhoods(positions, cfg.radius, cfg.k);
    let offsets = encode_local_geometry(positions, &nbrs)?;
    let mut stage_outputs = Vec::with_capacity(STAGES);
    let mut input = features.clone();
    for w in &weights.stages {
        let out = pointgfe_stage(&input, &offsets, w)?;
        input = out.clone();
        stage_outputs.push(out);
    }
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        for s in &stage_outputs {
            let c = s.shape()[1];
            data.extend_from_slice(&s.data()[i * c..(i + 1) * c]);
        }
    }
    Tensor::new(vec![n, width], data)
}

/// Input feature matrix `[N, 5]` (x, y, z, r, d) of augmented points.
pub fn point_feature_matrix(points: &[Point5]) -> Tensor {
    let data = points.iter().flat_map(|p| p.features().map(|v| v as f64)).collect();
    Tensor::new(vec![points.len(), 5], data).expect("finite point features")
}

pub fn pointgfe_stack(points: &[Point5], config: &PointGFEConfig, bundle: &WeightBundle) -> Result<PointEmbedding> {
    config.validate()?;
    let weights = PointGFEWeights::from_bundle(bundle, config, 5)?;
    let positions: Vec<Vec3> = points.iter().map(Point5::position).collect();
    encode_points(&positions, &point_feature_matrix(points), config, &weights)
}
