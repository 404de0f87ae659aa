//! Per-class reflectance histograms of the points inside ground-truth boxes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::warn;
use roifuse::kitti_io::{read_calibration, read_labels, read_point_cloud};
use roifuse::{CalibrationSet, ObjectClass, RawPoint};

pub const BINS: usize = 20;
pub const CLASSES: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];

/// Bin of a reflectance value: `[i/20, (i+1)/20)`, the last bin closed.
/// Values outside `[0, 1]` are clamped into the end bins.
pub fn bin_of(r: f32) -> usize {
    let f = (r as f64 * BINS as f64).floor();
    if f <= 0.0 {
        0
    } else {
        (f as usize).min(BINS - 1)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReflectanceHistogram {
    pub counts: BTreeMap<ObjectClass, [u64; BINS]>,
}

impl ReflectanceHistogram {
    pub fn new() -> Self {
        Self {
            counts: CLASSES.iter().map(|c| (*c, [0; BINS])).collect(),
        }
    }

    /// Adds every point inside a box of a tracked class (closed box, no margin).
    pub fn add_frame(&mut self, points: &[RawPoint], labels: &[roifuse::LabeledBox]) {
        for label in labels {
            let (Some(bbox), Some(hist)) = (&label.bbox, self.counts.get_mut(&label.class)) else {
                continue;
            };
            for p in points {
                if bbox.contains(p.position(), 0.0) {
                    hist[bin_of(p.r)] += 1;
                }
            }
        }
    }

    pub fn total(&self, class: ObjectClass) -> u64 {
        self.counts.get(&class).map_or(0, |h| h.iter().sum())
    }

    pub fn fraction(&self, class: ObjectClass, bin: usize) -> f64 {
        let total = self.total(class);
        if total == 0 {
            0.0
        } else {
            self.counts[&class][bin] as f64 / total as f64
        }
    }

    /// `class,bin_lo,bin_hi,count,fraction` with 20 rows per class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,bin_lo,bin_hi,count,fraction\n");
        for class in CLASSES {
            for bin in 0..BINS {
                out.push_str(&format!(
                    "{},{:.2},{:.2},{},{:.6}\n",
                    class.as_str(),
                    bin as f64 / BINS as f64,
                    (bin + 1) as f64 / BINS as f64,
                    self.counts[&class][bin],
                    self.fraction(class, bin)
                ));
            }
        }
        out
    }
}

fn stem(p: &Path) -> Option<String> {
    p.file_stem().map(|s| s.to_string_lossy().into_owned())
}

fn files_by_stem(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    if dir.is_file() {
        return Ok(stem(dir).map(|s| (s, dir.to_path_buf())).into_iter().collect());
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == ext) {
            if let Some(s) = stem(&path) {
                out.insert(s, path);
            }
        }
    }
    Ok(out)
}

/// Where the calibration for each frame comes from.
#[derive(Debug, Clone)]
pub enum CalibSource {
    Identity,
    Shared(Box<CalibrationSet>),
    PerFrame(PathBuf),
}

impl CalibSource {
    pub fn from_arg(arg: Option<&Path>) -> Result<Self> {
        match arg {
            None => Ok(CalibSource::Identity),
            Some(p) if p.is_dir() => Ok(CalibSource::PerFrame(p.to_path_buf())),
            Some(p) => Ok(CalibSource::Shared(Box::new(read_calibration(p)?))),
        }
    }

    fn for_frame(&self, stem: &str) -> Result<CalibrationSet> {
        Ok(match self {
            CalibSource::Identity => CalibrationSet::identity(),
            CalibSource::Shared(c) => (**c).clone(),
            CalibSource::PerFrame(dir) => read_calibration(dir.join(format!("{stem}.txt")))?,
        })
    }
}

/// Label and cloud files are paired by file stem (frame id); either side
/// may also be a single file.
pub fn compute_stats(labels: &Path, clouds: &Path, calib: &CalibSource) -> Result<ReflectanceHistogram> {
    let label_files = files_by_stem(labels, "txt")?;
    let cloud_files = files_by_stem(clouds, "bin")?;
    let single = label_files.len() == 1 && cloud_files.len() == 1;
    let mut hist = ReflectanceHistogram::new();
    for (frame, label_path) in &label_files {
        let cloud_path = match cloud_files.get(frame) {
            Some(p) => p,
            None if single => cloud_files.values().next().expect("one cloud"),
            None => {
                warn!("no point cloud for frame {frame}; skipped");
                continue;
            }
        };
        let calib = calib.for_frame(frame)?;
        let labels = read_labels(label_path, &calib)?;
        let points = read_point_cloud(cloud_path)?;
        hist.add_frame(&points, &labels);
    }
    for frame in cloud_files.keys().filter(|f| !label_files.contains_key(*f)) {
        if !single {
            warn!("no labels for frame {frame}; skipped");
        }
    }
    Ok(hist)
}
