//! Bidirectional gated fusion of the voxel-path and point-path RoI volumes.
//!
//! One stage computes per-channel gates from the global average of each
//! input, forms the gated sum `S = a_v ⊙ V + a_p ⊙ P` and returns
//! `S + refine(S)`. Three stages are chained, each one fusing the previous
//! output with the point volume, and their outputs are averaged.
//!
//! A hand-derived backward pass is provided so the forward math can be
//! checked against finite differences.

use crate::error::{Error, Result};
use crate::nn::{affine_forward, conv3d_backward, conv3d_forward, global_avg_pool, ParamSpec, Tensor, WeightBundle};
use crate::nn::ops::sigmoid_scalar;
use crate::roi_pooling::{FeatureVolume, VolumeTag};

pub const DEFAULT_STAGES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    /// Independent gates `a_v = σ(g_v)`, `a_p = σ(g_p)`.
    #[default]
    Sigmoid,
    /// Complementary gates `a_v = σ(g_v − g_p)`, `a_p = 1 − a_v`.
    Softmax,
}

impl GateMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sigmoid" => Some(GateMode::Sigmoid),
            "softmax" => Some(GateMode::Softmax),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            GateMode::Sigmoid => "sigmoid",
            GateMode::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BgrfConfig {
    /// Channel width of both fused volumes.
    pub channels: usize,
    /// Width the GAP vectors are unified to; also the gate MLP hidden width.
    pub unify_width: usize,
    /// Number of 3³ convolutions in the refinement branch.
    pub refine_depth: usize,
    pub stages: usize,
    pub gate_mode: GateMode,
}

impl Default for BgrfConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            unify_width: 32,
            refine_depth: 1,
            stages: DEFAULT_STAGES,
            gate_mode: GateMode::Sigmoid,
        }
    }
}

impl BgrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.unify_width == 0 || self.refine_depth == 0 || self.stages == 0 {
            return Err(Error::Invalid(format!("BGRF widths, depth and stage count must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Weight matrix `[out, in]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            w: Tensor::zeros(&[out, inp]),
            b: Tensor::zeros(&[out]),
        }
    }

    fn load(bundle: &WeightBundle, prefix: &str, out: usize, inp: usize) -> Result<Self> {
        Ok(Self {
            w: bundle.get_shaped(&format!("{prefix}.W"), &[out, inp])?.clone(),
            b: bundle.get_shaped(&format!("{prefix}.b"), &[out])?.clone(),
        })
    }

    fn manifest(prefix: &str, out: usize, inp: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(format!("{prefix}.W"), &[out, inp]),
            ParamSpec::with_fan_in(format!("{prefix}.b"), &[out], inp),
        ]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let inp = x.len();
        self.b
            .data()
            .iter()
            .enumerate()
            .map(|(o, b)| b + self.w.data()[o * inp..(o + 1) * inp].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

/// Linear–ReLU–Linear.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMlp {
    pub first: Linear,
    pub second: Linear,
}

impl GateMlp {
    fn load(bundle: &WeightBundle, prefix: &str, c: usize, cu: usize) -> Result<Self> {
        Ok(Self {
            first: Linear {
                w: bundle.get_shaped(&format!("{prefix}.W1"), &[cu, cu])?.clone(),
                b: bundle.get_shaped(&format!("{prefix}.b1"), &[cu])?.clone(),
            },
            second: Linear {
                w: bundle.get_shaped(&format!("{prefix}.W2"), &[c, cu])?.clone(),
                b: bundle.get_shaped(&format!("{prefix}.b2"), &[c])?.clone(),
            },
        })
    }

    fn manifest(prefix: &str, c: usize, cu: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(format!("{prefix}.W1"), &[cu, cu]),
            ParamSpec::with_fan_in(format!("{prefix}.b1"), &[cu], cu),
            ParamSpec::new(format!("{prefix}.W2"), &[c, cu]),
            ParamSpec::with_fan_in(format!("{prefix}.b2"), &[c], cu),
        ]
    }
}

/// A 3³ stride-1 padding-1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineConv {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BgrfStageWeights {
    pub unify_v: Linear,
    pub unify_p: Linear,
    pub gate_v: GateMlp,
    pub gate_p: GateMlp,
    pub refine: Vec<RefineConv>,
}

impl BgrfStageWeights {
    pub fn zeros(c: usize, cu: usize, refine_depth: usize) -> Self {
        let mlp = || GateMlp {
            first: Linear::zeros(cu, cu),
            second: Linear::zeros(c, cu),
        };
        Self {
            unify_v: Linear::zeros(cu, c),
            unify_p: Linear::zeros(cu, c),
            gate_v: mlp(),
            gate_p: mlp(),
            refine: (0..refine_depth)
                .map(|_| RefineConv {
                    kernel: Tensor::zeros(&[c, c, 3, 3, 3]),
                    bias: Tensor::zeros(&[c]),
                })
                .collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.unify_v.w.shape()[1]
    }

    pub fn unify_width(&self) -> usize {
        self.unify_v.w.shape()[0]
    }

    pub fn manifest(stage: usize, cfg: &BgrfConfig) -> Vec<ParamSpec> {
        let (c, cu) = (cfg.channels, cfg.unify_width);
        let p = stage_prefix(stage);
        let mut m = Linear::manifest(&format!("{p}.unify_v"), cu, c);
        m.extend(Linear::manifest(&format!("{p}.unify_p"), cu, c));
        m.extend(GateMlp::manifest(&format!("{p}.gate_v"), c, cu));
        m.extend(GateMlp::manifest(&format!("{p}.gate_p"), c, cu));
        for i in 0..cfg.refine_depth {
            m.push(ParamSpec::new(format!("{p}.refine.{i}.W"), &[c, c, 3, 3, 3]));
            m.push(ParamSpec::with_fan_in(format!("{p}.refine.{i}.b"), &[c], c * 27));
        }
        m
    }

    pub fn from_bundle(bundle: &WeightBundle, stage: usize, cfg: &BgrfConfig) -> Result<Self> {
        let (c, cu) = (cfg.channels, cfg.unify_width);
        let p = stage_prefix(stage);
        Ok(Self {
            unify_v: Linear::load(bundle, &format!("{p}.unify_v"), cu, c)?,
            unify_p: Linear::load(bundle, &format!("{p}.unify_p"), cu, c)?,
            gate_v: GateMlp::load(bundle, &format!("{p}.gate_v"), c, cu)?,
            gate_p: GateMlp::load(bundle, &format!("{p}.gate_p"), c, cu)?,
            refine: (0..cfg.refine_depth)
                .map(|i| {
                    Ok(RefineConv {
                        kernel: bundle.get_shaped(&format!("{p}.refine.{i}.W"), &[c, c, 3, 3, 3])?.clone(),
                        bias: bundle.get_shaped(&format!("{p}.refine.{i}.b"), &[c])?.clone(),
                    })
                })
                .collect::<Result<_>>()?,
        })
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.unify_v.w,
            &self.unify_v.b,
            &self.unify_p.w,
            &self.unify_p.b,
            &self.gate_v.first.w,
            &self.gate_v.first.b,
            &self.gate_v.second.w,
            &self.gate_v.second.b,
            &self.gate_p.first.w,
            &self.gate_p.first.b,
            &self.gate_p.second.w,
            &self.gate_p.second.b,
        ];
        for r in &self.refine {
            out.push(&r.kernel);
            out.push(&r.bias);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.unify_v.w,
            &mut self.unify_v.b,
            &mut self.unify_p.w,
            &mut self.unify_p.b,
            &mut self.gate_v.first.w,
            &mut self.gate_v.first.b,
            &mut self.gate_v.second.w,
            &mut self.gate_v.second.b,
            &mut self.gate_p.first.w,
            &mut self.gate_p.first.b,
            &mut self.gate_p.second.w,
            &mut self.gate_p.second.b,
        ];
        for r in &mut self.refine {
            out.push(&mut r.kernel);
            out.push(&mut r.bias);
        }
        out
    }

    /// Every parameter in a fixed order (the order of [`Self::unflatten`]).
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Copy of `self` with parameters taken from `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!("{} values for {} parameters", flat.len(), self.param_count())));
        }
        let mut out = self.clone();
        let mut at = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(out)
    }
}

fn stage_prefix(stage: usize) -> String {
    format!("bgrf.stage{}", stage + 1)
}

/// Intermediate values of one gate branch.
#[derive(Debug, Clone)]
struct BranchCache {
    gap: Vec<f64>,
    unified: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn branch_forward(vol: &Tensor, unify: &Linear, gate: &GateMlp) -> Result<BranchCache> {
    let gap = global_avg_pool(vol)?.into_data();
    let unified = unify.apply(&gap);
    let hidden = gate.first.apply(&relu_vec(&unified));
    let logits = gate.second.apply(&relu_vec(&hidden));
    Ok(BranchCache {
        gap,
        unified,
        hidden,
        logits,
    })
}

fn relu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

fn gates_from_logits(gv: &[f64], gp: &[f64], mode: GateMode) -> (Vec<f64>, Vec<f64>) {
    match mode {
        GateMode::Sigmoid => (gv.iter().map(|v| sigmoid_scalar(*v)).collect(), gp.iter().map(|v| sigmoid_scalar(*v)).collect()),
        GateMode::Softmax => {
            let av: Vec<f64> = gv.iter().zip(gp).map(|(a, b)| sigmoid_scalar(a - b)).collect();
            let ap = av.iter().map(|a| 1.0 - a).collect();
            (av, ap)
        }
    }
}

fn check_pair(v: &Tensor, p: &Tensor, w: &BgrfStageWeights) -> Result<()> {
    if v.shape() != p.shape() {
        return Err(Error::shape(format!("fused volumes differ in shape: {:?} vs {:?}", v.shape(), p.shape())));
    }
    if v.shape().len() != 4 || v.shape()[0] != w.channels() {
        return Err(Error::shape(format!("volume {:?} does not match {} stage channels", v.shape(), w.channels())));
    }
    Ok(())
}

/// Per-channel gates `(a_v, a_p)` of one stage.
pub fn stage_gates(v: &Tensor, p: &Tensor, w: &BgrfStageWeights, mode: GateMode) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(v, p, w)?;
    let bv = branch_forward(v, &w.unify_v, &w.gate_v)?;
    let bp = branch_forward(p, &w.unify_p, &w.gate_p)?;
    Ok(gates_from_logits(&bv.logits, &bp.logits, mode))
}

/// `S = a_v ⊙ V + a_p ⊙ P` with channel-wise gates broadcast over cells.
pub fn weighted_sum(v: &Tensor, p: &Tensor, a_v: &[f64], a_p: &[f64]) -> Result<Tensor> {
    if v.shape() != p.shape() || v.shape().first() != Some(&a_v.len()) || a_v.len() != a_p.len() {
        return Err(Error::shape("gated sum operands disagree in shape"));
    }
    let cells = v.len() / a_v.len().max(1);
    let data = v
        .data()
        .iter()
        .zip(p.data())
        .enumerate()
        .map(|(i, (x, y))| {
            let c = i / cells;
            a_v[c] * x + a_p[c] * y
        })
        .collect();
    Tensor::new(v.shape().to_vec(), data)
}

/// Refinement chain; returns the input of every conv and every conv output.
fn refine_forward(s: &Tensor, refine: &[RefineConv]) -> Result<(Vec<Tensor>, Tensor)> {
    let mut inputs = Vec::with_capacity(refine.len());
    let mut x = s.clone();
    for (i, conv) in refine.iter().enumerate() {
        let y = conv3d_forward(&conv.kernel, &conv.bias, &x, 1, 1)?;
        inputs.push(x);
        x = if i + 1 < refine.len() { crate::nn::relu(&y) } else { y };
    }
    Ok((inputs, x))
}

struct StageCache {
    bv: BranchCache,
    bp: BranchCache,
    a_v: Vec<f64>,
    a_p: Vec<f64>,
    refine_inputs: Vec<Tensor>,
    out: Tensor,
}

fn stage_forward(v: &Tensor, p: &Tensor, w: &BgrfStageWeights, mode: GateMode) -> Result<StageCache> {
    check_pair(v, p, w)?;
    let bv = branch_forward(v, &w.unify_v, &w.gate_v)?;
    let bp = branch_forward(p, &w.unify_p, &w.gate_p)?;
    let (a_v, a_p) = gates_from_logits(&bv.logits, &bp.logits, mode);
    let s = weighted_sum(v, p, &a_v, &a_p)?;
    let (refine_inputs, r) = refine_forward(&s, &w.refine)?;
    let out_data = s.data().iter().zip(r.data()).map(|(a, b)| a + b).collect();
    Ok(StageCache {
        bv,
        bp,
        a_v,
        a_p,
        refine_inputs,
        out: Tensor::new(v.shape().to_vec(), out_data)?,
    })
}

/// One fusion stage on raw `[C, g, g, g]` tensors.
pub fn fuse_tensors(v: &Tensor, p: &Tensor, w: &BgrfStageWeights, mode: GateMode) -> Result<Tensor> {
    Ok(stage_forward(v, p, w, mode)?.out)
}

pub fn gated_fuse_stage(v: &FeatureVolume, p: &FeatureVolume, w: &BgrfStageWeights, mode: GateMode) -> Result<FeatureVolume> {
    FeatureVolume::new(VolumeTag::Fused, fuse_tensors(v.tensor(), p.tensor(), w, mode)?)
}

/// Gradients of a scalar loss through one stage.
#[derive(Debug, Clone)]
pub struct StageGrads {
    /// Same layout as the stage weights.
    pub weights: BgrfStageWeights,
    pub v: Tensor,
    pub p: Tensor,
}

fn branch_backward(
    cache: &BranchCache,
    d_logits: &[f64],
    unify: &Linear,
    gate: &GateMlp,
    grads_unify: &mut Linear,
    grads_gate: &mut GateMlp,
) -> Vec<f64> {
    let cu = cache.unified.len();
    let c = d_logits.len();
    let h_act = relu_vec(&cache.hidden);
    let u_act = relu_vec(&cache.unified);

    // second gate layer: logits = W2 relu(hidden) + b2
    let mut d_hidden = vec![0.0; cu];
    for o in 0..c {
        grads_gate.second.b.data_mut()[o] += d_logits[o];
        for j in 0..cu {
            grads_gate.second.w.data_mut()[o * cu + j] += d_logits[o] * h_act[j];
            d_hidden[j] += gate.second.w.data()[o * cu + j] * d_logits[o];
        }
    }
    for (d, h) in d_hidden.iter_mut().zip(&cache.hidden) {
        if *h <= 0.0 {
            *d = 0.0;
        }
    }
    // first gate layer: hidden = W1 relu(unified) + b1
    let mut d_unified = vec![0.0; cu];
    for o in 0..cu {
        grads_gate.first.b.data_mut()[o] += d_hidden[o];
        for j in 0..cu {
            grads_gate.first.w.data_mut()[o * cu + j] += d_hidden[o] * u_act[j];
            d_unified[j] += gate.first.w.data()[o * cu + j] * d_hidden[o];
        }
    }
    for (d, u) in d_unified.iter_mut().zip(&cache.unified) {
        if *u <= 0.0 {
            *d = 0.0;
        }
    }
    // unify: unified = Wu gap + bu
    let cin = cache.gap.len();
    let mut d_gap = vec![0.0; cin];
    for o in 0..cu {
        grads_unify.b.data_mut()[o] += d_unified[o];
        for j in 0..cin {
            grads_unify.w.data_mut()[o * cin + j] += d_unified[o] * cache.gap[j];
            d_gap[j] += unify.w.data()[o * cin + j] * d_unified[o];
        }
    }
    d_gap
}

/// Backward pass of [`fuse_tensors`] for upstream gradient `grad_out`.
pub fn fuse_backward(v: &Tensor, p: &Tensor, w: &BgrfStageWeights, mode: GateMode, grad_out: &Tensor) -> Result<StageGrads> {
    let cache = stage_forward(v, p, w, mode)?;
    grad_out.expect_shape(cache.out.shape(), "stage grad_out")?;
    let c = w.channels();
    let cells = v.len() / c;
    let mut grads = BgrfStageWeights::zeros(c, w.unify_width(), w.refine.len());

    // out = S + refine(S)
    let mut d_s = grad_out.clone();
    let mut g = grad_out.clone();
    for i in (0..w.refine.len()).rev() {
        let conv = &w.refine[i];
        let x = &cache.refine_inputs[i];
        let cg = conv3d_backward(&conv.kernel, &conv.bias, x, &g, 1, 1)?;
        grads.refine[i].kernel = cg.kernel;
        grads.refine[i].bias = cg.bias;
        g = cg.input;
        if i > 0 {
            // x = relu(y_{i-1}); x > 0 exactly where y_{i-1} > 0
            for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
                if *xv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
    }
    for (a, b) in d_s.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }

    // S = a_v V + a_p P
    let mut d_v = vec![0.0; v.len()];
    let mut d_p = vec![0.0; p.len()];
    let mut d_av = vec![0.0; c];
    let mut d_ap = vec![0.0; c];
    for (i, ds) in d_s.data().iter().enumerate() {
        let ch = i / cells;
        d_v[i] = cache.a_v[ch] * ds;
        d_p[i] = cache.a_p[ch] * ds;
        d_av[ch] += ds * v.data()[i];
        d_ap[ch] += ds * p.data()[i];
    }

    let (d_gv, d_gp): (Vec<f64>, Vec<f64>) = match mode {
        GateMode::Sigmoid => (
            (0..c).map(|k| d_av[k] * cache.a_v[k] * (1.0 - cache.a_v[k])).collect(),
            (0..c).map(|k| d_ap[k] * cache.a_p[k] * (1.0 - cache.a_p[k])).collect(),
        ),
        GateMode::Softmax => {
            let dd: Vec<f64> = (0..c).map(|k| (d_av[k] - d_ap[k]) * cache.a_v[k] * (1.0 - cache.a_v[k])).collect();
            let neg = dd.iter().map(|x| -x).collect();
            (dd, neg)
        }
    };

    let d_gap_v = branch_backward(&cache.bv, &d_gv, &w.unify_v, &w.gate_v, &mut grads.unify_v, &mut grads.gate_v);
    let d_gap_p = branch_backward(&cache.bp, &d_gp, &w.unify_p, &w.gate_p, &mut grads.unify_p, &mut grads.gate_p);
    let inv = 1.0 / cells as f64;
    for (i, (dv, dp)) in d_v.iter_mut().zip(d_p.iter_mut()).enumerate() {
        *dv += d_gap_v[i / cells] * inv;
        *dp += d_gap_p[i / cells] * inv;
    }

    Ok(StageGrads {
        weights: grads,
        v: Tensor::new(v.shape().to_vec(), d_v)?,
        p: Tensor::new(p.shape().to_vec(), d_p)?,
    })
}

/// Stage outputs of the cascade and their element-wise mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    pub stages: Vec<FeatureVolume>,
    pub mean: FeatureVolume,
}

pub fn cascade(v: &FeatureVolume, p: &FeatureVolume, stages: &[BgrfStageWeights], mode: GateMode) -> Result<CascadeOutput> {
    if stages.is_empty() {
        return Err(Error::Bundle("cascade needs at least one stage".into()));
    }
    let mut outs: Vec<FeatureVolume> = Vec::with_capacity(stages.len());
    for w in stages {
        let prev = outs.last().unwrap_or(v);
        outs.push(gated_fuse_stage(prev, p, w, mode)?);
    }
    let inv = 1.0 / outs.len() as f64;
    let mut mean = vec![0.0; v.tensor().len()];
    for o in &outs {
        for (m, x) in mean.iter_mut().zip(o.tensor().data()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv);
    let mean = FeatureVolume::new(VolumeTag::Fused, Tensor::new(v.tensor().shape().to_vec(), mean)?)?;
    Ok(CascadeOutput { stages: outs, mean })
}

/// Row-major flattening of a volume into the vector a RoI head consumes.
pub fn flatten_for_head(vol: &FeatureVolume) -> Vec<f32> {
    vol.tensor().data().iter().map(|v| *v as f32).collect()
}

/// Cascade weights plus the optional channel adapters in front of it.
#[derive(Debug, Clone)]
pub struct BgrfWeights {
    pub adapt_v: Option<Linear>,
    pub adapt_p: Option<Linear>,
    pub stages: Vec<BgrfStageWeights>,
    pub mode: GateMode,
}

/// Full parameter manifest; adapters appear only for mismatched widths.
pub fn bgrf_manifest(cfg: &BgrfConfig, voxel_channels: usize, point_channels: usize) -> Vec<ParamSpec> {
    let mut m = Vec::new();
    if voxel_channels != cfg.channels {
        m.extend(Linear::manifest("bgrf.adapt_v", cfg.channels, voxel_channels));
    }
    if point_channels != cfg.channels {
        m.extend(Linear::manifest("bgrf.adapt_p", cfg.channels, point_channels));
    }
    for s in 0..cfg.stages {
        m.extend(BgrfStageWeights::manifest(s, cfg));
    }
    m
}

impl BgrfWeights {
    pub fn from_bundle(bundle: &WeightBundle, cfg: &BgrfConfig, voxel_channels: usize, point_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let adapter = |name: &str, cin: usize| -> Result<Option<Linear>> {
            if cin == cfg.channels {
                Ok(None)
            } else {
                Linear::load(bundle, name, cfg.channels, cin).map(Some)
            }
        };
        Ok(Self {
            adapt_v: adapter("bgrf.adapt_v", voxel_channels)?,
            adapt_p: adapter("bgrf.adapt_p", point_channels)?,
            stages: (0..cfg.stages)
                .map(|s| BgrfStageWeights::from_bundle(bundle, s, cfg))
                .collect::<Result<_>>()?,
            mode: cfg.gate_mode,
        })
    }

    /// Adapts both volumes to the common width and runs the cascade.
    pub fn fuse(&self, v: &FeatureVolume, p: &FeatureVolume) -> Result<CascadeOutput> {
        let v = adapt(v, self.adapt_v.as_ref())?;
        let p = adapt(p, self.adapt_p.as_ref())?;
        cascade(&v, &p, &self.stages, self.mode)
    }
}

/// Pointwise channel map `[Ci, g³] → [Co, g³]`, no activation.
pub fn adapt(vol: &FeatureVolume, adapter: Option<&Linear>) -> Result<FeatureVolume> {
    let Some(lin) = adapter else {
        return Ok(vol.clone());
    };
    let (c, g) = (vol.channels(), vol.grid());
    let cells = g * g * g;
    // [C, cells] → [cells, C] → affine → back
    let mut cols = vec![0.0; c * cells];
    for ch in 0..c {
        for cell in 0..cells {
            cols[cell * c + ch] = vol.tensor().data()[ch * cells + cell];
        }
    }
    let y = affine_forward(&lin.w, &lin.b, &Tensor::new(vec![cells, c], cols)?)?;
    let co = lin.w.shape()[0];
    let mut out = vec![0.0; co * cells];
    for cell in 0..cells {
        for o in 0..co {
            out[o * cells + cell] = y.data()[cell * co + o];
        }
    }
    FeatureVolume::new(vol.tag, Tensor::new(vec![co, g, g, g], out)?)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{finite_diff_check, seeded_init};

    fn vol(t: Tensor) -> FeatureVolume {
        FeatureVolume::new(VolumeTag::VoxelPath, t).unwrap()
    }

    fn random_volume(rng: &mut ChaCha8Rng, c: usize, g: usize) -> FeatureVolume {
        vol(Tensor::from_fn(&[c, g, g, g], |_| rng.gen_range(-1.0..1.0)))
    }

    fn random_stage(rng: &mut ChaCha8Rng, c: usize, cu: usize, depth: usize) -> BgrfStageWeights {
        let z = BgrfStageWeights::zeros(c, cu, depth);
        let flat: Vec<f64> = (0..z.param_count()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        z.unflatten(&flat).unwrap()
    }

    #[test]
    fn zero_weights_average_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_volume(&mut rng, 4, 6);
        let p = random_volume(&mut rng, 4, 6);
        let w = BgrfStageWeights::zeros(4, 3, 1);
        let out = gated_fuse_stage(&v, &p, &w, GateMode::Sigmoid).unwrap();
        for ((o, a), b) in out.tensor().data().iter().zip(v.tensor().data()).zip(p.tensor().data()) {
            assert!((o - 0.5 * (a + b)).abs() < 1e-12);
        }
        let soft = gated_fuse_stage(&v, &p, &w, GateMode::Softmax).unwrap();
        assert_eq!(soft, out);
    }

    #[test]
    fn saturated_gates_pass_voxel_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_volume(&mut rng, 4, 6);
        let p = random_volume(&mut rng, 4, 6);
        let mut w = BgrfStageWeights::zeros(4, 3, 1);
        w.gate_v.second.b = Tensor::full(&[4], 20.0);
        w.gate_p.second.b = Tensor::full(&[4], -20.0);
        let out = gated_fuse_stage(&v, &p, &w, GateMode::Sigmoid).unwrap();
        assert!(out.tensor().max_abs_diff(v.tensor()) < 1e-7);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_volume(&mut rng, 4, 6);
        let p = random_volume(&mut rng, 4, 4);
        let w = BgrfStageWeights::zeros(4, 3, 1);
        assert!(matches!(gated_fuse_stage(&v, &p, &w, GateMode::Sigmoid), Err(Error::Shape(_))));
        let w5 = BgrfStageWeights::zeros(5, 3, 1);
        assert!(matches!(gated_fuse_stage(&v, &v, &w5, GateMode::Sigmoid), Err(Error::Shape(_))));
    }

    /// Straight loops over every index, independent of the library helpers.
    fn stage_oracle(v: &[f64], p: &[f64], c: usize, g: usize, w: &BgrfStageWeights, mode: GateMode) -> Vec<f64> {
        let cells = g * g * g;
        let cu = w.unify_width();
        let branch = |x: &[f64], u: &Linear, m: &GateMlp| -> Vec<f64> {
            let mut gap = vec![0.0; c];
            for ch in 0..c {
                for cell in 0..cells {
                    gap[ch] += x[ch * cells + cell];
                }
                gap[ch] /= cells as f64;
            }
            let mut h1 = vec![0.0; cu];
            for o in 0..cu {
                let mut a = u.b.data()[o];
                for j in 0..c {
                    a += u.w.data()[o * c + j] * gap[j];
                }
                h1[o] = if a > 0.0 { a } else { 0.0 };
            }
            let mut h2 = vec![0.0; cu];
            for o in 0..cu {
                let mut a = m.first.b.data()[o];
                for j in 0..cu {
                    a += m.first.w.data()[o * cu + j] * h1[j];
                }
                h2[o] = if a > 0.0 { a } else { 0.0 };
            }
            let mut out = vec![0.0; c];
            for o in 0..c {
                let mut a = m.second.b.data()[o];
                for j in 0..cu {
                    a += m.second.w.data()[o * cu + j] * h2[j];
                }
                out[o] = a;
            }
            out
        };
        let gv = branch(v, &w.unify_v, &w.gate_v);
        let gp = branch(p, &w.unify_p, &w.gate_p);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (av, ap): (Vec<f64>, Vec<f64>) = match mode {
            GateMode::Sigmoid => (gv.iter().map(|x| sig(*x)).collect(), gp.iter().map(|x| sig(*x)).collect()),
            GateMode::Softmax => (0..c)
                .map(|k| {
                    let (ev, ep) = (gv[k].exp(), gp[k].exp());
                    (ev / (ev + ep), ep / (ev + ep))
                })
                .unzip(),
        };
        let mut s = vec![0.0; c * cells];
        for ch in 0..c {
            for cell in 0..cells {
                s[ch * cells + cell] = av[ch] * v[ch * cells + cell] + ap[ch] * p[ch * cells + cell];
            }
        }
        let conv = |x: &[f64], k: &RefineConv| -> Vec<f64> {
            let mut y = vec![0.0; c * cells];
            for o in 0..c {
                for z in 0..g {
                    for yy in 0..g {
                        for xx in 0..g {
                            let mut a = k.bias.data()[o];
                            for i in 0..c {
                                for dz in 0..3 {
                                    for dy in 0..3 {
                                        for dx in 0..3 {
                                            let (zz, y2, x2) = (z + dz, yy + dy, xx + dx);
                                            if zz < 1 || y2 < 1 || x2 < 1 || zz > g || y2 > g || x2 > g {
                                                continue;
                                            }
                                            a += k.kernel.data()[(((o * c + i) * 3 + dz) * 3 + dy) * 3 + dx]
                                                * x[((i * g + zz - 1) * g + y2 - 1) * g + x2 - 1];
                                        }
                                    }
                                }
                            }
                            y[((o * g + z) * g + yy) * g + xx] = a;
                        }
                    }
                }
            }
            y
        };
        let mut r = s.clone();
        for (i, k) in w.refine.iter().enumerate() {
            r = conv(&r, k);
            if i + 1 < w.refine.len() {
                r.iter_mut().for_each(|x| *x = x.max(0.0));
            }
        }
        s.iter().zip(&r).map(|(a, b)| a + b).collect()
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (depth, mode) in [(1, GateMode::Sigmoid), (2, GateMode::Sigmoid), (1, GateMode::Softmax)] {
            let (c, g) = (5, 4);
            let v = random_volume(&mut rng, c, g);
            let p = random_volume(&mut rng, c, g);
            let w = random_stage(&mut rng, c, 3, depth);
            let got = gated_fuse_stage(&v, &p, &w, mode).unwrap();
            let want = stage_oracle(v.tensor().data(), p.tensor().data(), c, g, &w, mode);
            for (a, b) in got.tensor().data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gates_lie_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let v = random_volume(&mut rng, 6, 3);
            let p = random_volume(&mut rng, 6, 3);
            let w = random_stage(&mut rng, 6, 4, 1);
            for mode in [GateMode::Sigmoid, GateMode::Softmax] {
                let (av, ap) = stage_gates(v.tensor(), p.tensor(), &w, mode).unwrap();
                assert!(av.iter().chain(&ap).all(|a| *a > 0.0 && *a < 1.0));
            }
        }
    }

    #[test]
    fn gated_sum_is_homogeneous_with_frozen_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = random_volume(&mut rng, 4, 3);
        let p = random_volume(&mut rng, 4, 3);
        let w = random_stage(&mut rng, 4, 3, 1);
        let (av, ap) = stage_gates(v.tensor(), p.tensor(), &w, GateMode::Sigmoid).unwrap();
        let s = weighted_sum(v.tensor(), p.tensor(), &av, &ap).unwrap();
        for alpha in [0.5, 2.0, -3.0] {
            let s2 = weighted_sum(&v.tensor().scale(alpha), &p.tensor().scale(alpha), &av, &ap).unwrap();
            assert!(s2.max_abs_diff(&s.scale(alpha)) < 1e-12);
        }
    }

    #[test]
    fn zero_weight_cascade_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = random_volume(&mut rng, 3, 6);
        let p = random_volume(&mut rng, 3, 6);
        let stages = vec![BgrfStageWeights::zeros(3, 2, 1); 3];
        let out = cascade(&v, &p, &stages, GateMode::Sigmoid).unwrap();
        assert_eq!(out.stages.len(), 3);
        for (i, (a, b)) in v.tensor().data().iter().zip(p.tensor().data()).enumerate() {
            // s1 = (v+p)/2, s2 = v/4 + 3p/4, s3 = v/8 + 7p/8
            let s = [0.5 * a + 0.5 * b, 0.25 * a + 0.75 * b, 0.125 * a + 0.875 * b];
            for k in 0..3 {
                assert!((out.stages[k].tensor().data()[i] - s[k]).abs() < 1e-12);
            }
            let mean = (7.0 * a + 17.0 * b) / 24.0;
            assert!((out.mean.tensor().data()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_inputs_scale_by_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_volume(&mut rng, 4, 3);
        let w = random_stage(&mut rng, 4, 3, 1);
        let w = BgrfStageWeights {
            refine: BgrfStageWeights::zeros(4, 3, 1).refine,
            ..w
        };
        let out = cascade(&x, &x, &[w.clone(), w.clone(), w], GateMode::Sigmoid).unwrap();
        // Each output is diag(α) X per channel: the ratio is constant per channel.
        let cells = 27;
        for o in out.stages.iter().chain([&out.mean]) {
            for ch in 0..4 {
                let base = o.tensor().data()[ch * cells] / x.tensor().data()[ch * cells];
                for cell in 0..cells {
                    let r = o.tensor().data()[ch * cells + cell] / x.tensor().data()[ch * cells + cell];
                    assert!((r - base).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn cascade_composes_single_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = random_volume(&mut rng, 4, 4);
        let p = random_volume(&mut rng, 4, 4);
        let stages: Vec<_> = (0..3).map(|_| random_stage(&mut rng, 4, 3, 1)).collect();
        let out = cascade(&v, &p, &stages, GateMode::Sigmoid).unwrap();
        let s1 = gated_fuse_stage(&v, &p, &stages[0], GateMode::Sigmoid).unwrap();
        let s2 = gated_fuse_stage(&s1, &p, &stages[1], GateMode::Sigmoid).unwrap();
        let s3 = gated_fuse_stage(&s2, &p, &stages[2], GateMode::Sigmoid).unwrap();
        assert_eq!(out.stages, vec![s1, s2, s3]);
        assert!(cascade(&v, &p, &[], GateMode::Sigmoid).is_err());
    }

    fn grad_check(seed: u64, depth: usize, mode: GateMode) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, cu, g) = (3, 3, 4);
        let v = random_volume(&mut rng, c, g);
        let p = random_volume(&mut rng, c, g);
        let w = random_stage(&mut rng, c, cu, depth);
        let ones = Tensor::full(&[c, g, g, g], 1.0);
        let loss = |x: &[f64]| -> f64 {
            let wx = w.unflatten(x).unwrap();
            fuse_tensors(v.tensor(), p.tensor(), &wx, mode).unwrap().data().iter().sum()
        };
        let grad = |x: &[f64]| -> Vec<f64> {
            let wx = w.unflatten(x).unwrap();
            fuse_backward(v.tensor(), p.tensor(), &wx, mode, &ones).unwrap().weights.flatten()
        };
        finite_diff_check(loss, grad, &w.flatten(), 1e-4)
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        for seed in 0..3 {
            let e = grad_check(seed, 1, GateMode::Sigmoid);
            assert!(e <= 1e-4, "seed {seed}: {e}");
        }
        assert!(grad_check(11, 1, GateMode::Softmax) <= 1e-4);
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (c, g) = (3, 3);
        let v = random_volume(&mut rng, c, g);
        let p = random_volume(&mut rng, c, g);
        let w = random_stage(&mut rng, c, 3, 1);
        let ones = Tensor::full(&[c, g, g, g], 1.0);
        let n = v.tensor().len();
        let split = |x: &[f64]| {
            (
                Tensor::new(vec![c, g, g, g], x[..n].to_vec()).unwrap(),
                Tensor::new(vec![c, g, g, g], x[n..].to_vec()).unwrap(),
            )
        };
        let x0: Vec<f64> = v.tensor().data().iter().chain(p.tensor().data()).copied().collect();
        let err = finite_diff_check(
            |x| {
                let (a, b) = split(x);
                fuse_tensors(&a, &b, &w, GateMode::Sigmoid).unwrap().data().iter().sum()
            },
            |x| {
                let (a, b) = split(x);
                let gr = fuse_backward(&a, &b, &w, GateMode::Sigmoid, &ones).unwrap();
                gr.v.data().iter().chain(gr.p.data()).copied().collect()
            },
            &x0,
            1e-4,
        );
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn flatten_examples() {
        let c = vol(Tensor::full(&[1, 6, 6, 6], 2.5));
        assert_eq!(flatten_for_head(&c), vec![2.5f32; 216]);
        let two = vol(Tensor::zeros(&[2, 6, 6, 6]));
        assert_eq!(flatten_for_head(&two).len(), 432);

        let fixture = vol(Tensor::from_fn(&[2, 6, 6, 6], |i| (i as f64 - 200.0) / 8.0));
        let flat = flatten_for_head(&fixture);
        let bits: Vec<u32> = [0usize, 1, 215, 216, 431].iter().map(|&i| flat[i].to_bits()).collect();
        assert_eq!(bits, [0xC1C8_0000, 0xC1C7_0000, 0x3FF0_0000, 0x4000_0000, 0x41E7_0000]);
    }

    #[test]
    fn bundle_round_trip_with_adapters() {
        let cfg = BgrfConfig {
            channels: 4,
            unify_width: 2,
            ..Default::default()
        };
        let manifest = bgrf_manifest(&cfg, 5, 4);
        assert!(manifest.iter().any(|s| s.name == "bgrf.adapt_v.W"));
        assert!(!manifest.iter().any(|s| s.name.starts_with("bgrf.adapt_p")));
        assert!(manifest.iter().any(|s| s.name == "bgrf.stage3.refine.0.W"));
        let bundle = seeded_init(3, &manifest);
        let weights = BgrfWeights::from_bundle(&bundle, &cfg, 5, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let v = random_volume(&mut rng, 5, 6);
        let p = random_volume(&mut rng, 4, 6);
        let out = weights.fuse(&v, &p).unwrap();
        assert_eq!(out.mean.tensor().shape(), &[4, 6, 6, 6]);
        assert!(out.stages.iter().all(|s| s.tensor().shape() == [4, 6, 6, 6]));

        let mut partial = WeightBundle::new();
        for (name, t) in bundle.iter().filter(|(n, _)| !n.starts_with("bgrf.stage3")) {
            partial.insert(name, t.clone());
        }
        assert!(matches!(BgrfWeights::from_bundle(&partial, &cfg, 5, 4), Err(Error::Bundle(_))));
    }

    #[test]
    fn adapter_is_pointwise_linear() {
        let lin = Linear {
            w: Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap(),
            b: Tensor::new(vec![1], vec![0.5]).unwrap(),
        };
        let v = vol(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64));
        let out = adapt(&v, Some(&lin)).unwrap();
        for cell in 0..8 {
            let expect = 2.0 * cell as f64 - (cell + 8) as f64 + 0.5;
            assert_eq!(out.tensor().data()[cell], expect);
        }
    }
}
