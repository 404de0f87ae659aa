//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. `box` may repeat;
//! every other key may appear once. Relative paths resolve against the
//! directory holding the config file.
//!
//! | key | value |
//! |-----|-------|
//! | `cloud`, `calib`, `depth` | input files (KITTI velodyne, calib text, depth raster) |
//! | `labels` | optional KITTI label file; every non-`DontCare` row becomes a box |
//! | `box` | `cx cy cz l w h yaw` in the LiDAR frame |
//! | `weights` | optional weight bundle; seeded init is used when absent |
//! | `voxel_features` | optional voxel feature file replacing the mean features |
//! | `grid.origin`, `grid.voxel_size` | three floats each |
//! | `grid.extent` | three integers |
//! | `gfe.radius`, `gfe.k`, `gfe.widths` | encoder settings (`widths` takes three integers) |
//! | `roi.n`, `roi.m`, `roi.grid_query_radius`, `roi.grid_query_k`, `roi.margin` | pooling settings |
//! | `bgrf.unify_width`, `bgrf.refine_depth`, `bgrf.gate_mode` | fusion settings (`sigmoid` or `softmax`) |
//! | `seed`, `jobs`, `out_dir` | run settings, overridable from the command line |

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use roifuse::gated_fusion::GateMode;
use roifuse::{BgrfConfig, Box3D, GridSpec, PointGFEConfig, RoiPoolConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub cloud: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub depth: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub voxel_features: Option<PathBuf>,
    pub boxes: Vec<Box3D>,
    pub grid: GridSpec,
    pub gfe: PointGFEConfig,
    pub roi: RoiPoolConfig,
    pub bgrf: BgrfConfig,
    pub seed: u64,
    pub jobs: usize,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cloud: None,
            calib: None,
            depth: None,
            labels: None,
            weights: None,
            voxel_features: None,
            boxes: Vec::new(),
            grid: GridSpec::default(),
            gfe: PointGFEConfig::default(),
            roi: RoiPoolConfig::default(),
            bgrf: BgrfConfig::default(),
            seed: 0,
            jobs: 1,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn floats<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let parts: Vec<f64> = value
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| anyhow!("`{key}`: `{t}` is not a number")))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<f64>| anyhow!("`{key}` expects {N} numbers, got {}", p.len()))
}

fn integers<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let parts: Vec<usize> = value
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| anyhow!("`{key}`: `{t}` is not a non-negative integer")))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<usize>| anyhow!("`{key}` expects {N} integers, got {}", p.len()))
}

fn scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| anyhow!("`{key}`: cannot parse `{value}`"))
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        let resolve = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            if key != "box" && !seen.insert(key.to_string()) {
                bail!("line {}: duplicate key `{key}`", i + 1);
            }
            let ctx = || format!("line {}", i + 1);
            match key {
                "cloud" => cfg.cloud = Some(resolve(value)),
                "calib" => cfg.calib = Some(resolve(value)),
                "depth" => cfg.depth = Some(resolve(value)),
                "labels" => cfg.labels = Some(resolve(value)),
                "weights" => cfg.weights = Some(resolve(value)),
                "voxel_features" => cfg.voxel_features = Some(resolve(value)),
                "out_dir" => cfg.out_dir = resolve(value),
                "box" => {
                    let [cx, cy, cz, l, w, h, yaw] = floats::<7>(key, value).with_context(ctx)?;
                    cfg.boxes.push(Box3D::new([cx, cy, cz], [l, w, h], yaw).with_context(ctx)?);
                }
                "grid.origin" => cfg.grid.origin = floats::<3>(key, value)?,
                "grid.voxel_size" => cfg.grid.voxel_size = floats::<3>(key, value)?,
                "grid.extent" => cfg.grid.extent = integers::<3>(key, value)?,
                "gfe.radius" => cfg.gfe.radius = scalar(key, value)?,
                "gfe.k" => cfg.gfe.k = scalar(key, value)?,
                "gfe.widths" => cfg.gfe.stage_widths = integers::<3>(key, value)?,
                "roi.n" => cfg.roi.n = scalar(key, value)?,
                "roi.m" => cfg.roi.m = scalar(key, value)?,
                "roi.grid_query_radius" => cfg.roi.grid_query_radius = scalar(key, value)?,
                "roi.grid_query_k" => cfg.roi.grid_query_k = scalar(key, value)?,
                "roi.margin" => cfg.roi.margin = scalar(key, value)?,
                "bgrf.unify_width" => cfg.bgrf.unify_width = scalar(key, value)?,
                "bgrf.refine_depth" => cfg.bgrf.refine_depth = scalar(key, value)?,
                "bgrf.gate_mode" => {
                    cfg.bgrf.gate_mode =
                        GateMode::parse(value).ok_or_else(|| anyhow!("`{key}` must be sigmoid or softmax, got `{value}`"))?
                }
                "seed" => cfg.seed = scalar(key, value)?,
                "jobs" => cfg.jobs = scalar(key, value)?,
                other => bail!("line {}: unknown key `{other}`", i + 1),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.gfe.validate()?;
        self.roi.validate()?;
        self.bgrf.validate()?;
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        Ok(())
    }

    /// Fusion settings with the channel width tied to the encoder output.
    pub fn fusion(&self) -> BgrfConfig {
        BgrfConfig {
            channels: self.gfe.output_width(),
            ..self.bgrf.clone()
        }
    }

    /// Serializes back to the text format. Parsing the result with an empty
    /// base directory gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let paths = [
            ("cloud", &self.cloud),
            ("calib", &self.calib),
            ("depth", &self.depth),
            ("labels", &self.labels),
            ("weights", &self.weights),
            ("voxel_features", &self.voxel_features),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                line(k, p.display().to_string());
            }
        }
        for b in &self.boxes {
            let c = b.center();
            let d = b.dims();
            line("box", join(&[c[0], c[1], c[2], d[0], d[1], d[2], b.yaw]));
        }
        line("grid.origin", join(&self.grid.origin));
        line("grid.voxel_size", join(&self.grid.voxel_size));
        line("grid.extent", self.grid.extent.map(|e| e.to_string()).join(" "));
        line("gfe.radius", format!("{:?}", self.gfe.radius));
        line("gfe.k", self.gfe.k.to_string());
        line("gfe.widths", self.gfe.stage_widths.map(|e| e.to_string()).join(" "));
        line("roi.n", self.roi.n.to_string());
        line("roi.m", self.roi.m.to_string());
        line("roi.grid_query_radius", format!("{:?}", self.roi.grid_query_radius));
        line("roi.grid_query_k", self.roi.grid_query_k.to_string());
        line("roi.margin", format!("{:?}", self.roi.margin));
        line("bgrf.unify_width", self.bgrf.unify_width.to_string());
        line("bgrf.refine_depth", self.bgrf.refine_depth.to_string());
        line("bgrf.gate_mode", self.bgrf.gate_mode.as_str().to_string());
        line("seed", self.seed.to_string());
        line("jobs", self.jobs.to_string());
        line("out_dir", self.out_dir.display().to_string());
        out
    }
}
