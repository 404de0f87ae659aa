//! Deterministic point-cloud RoI feature extraction.
//!
//! LiDAR points are augmented with a monocular depth prior, then every
//! region of interest is described twice: once by grid pooling over a sparse
//! voxel feature map, once by a point-wise local-geometry encoder followed by
//! RoI-aware max pooling. A cascade of gated fusion stages merges the two.
//!
//! All math is forward-only and deterministic. Files use single precision,
//! internal accumulation uses double precision.

pub mod depth_prior;
pub mod error;
pub mod gated_fusion;
pub mod geometry;
pub mod kitti_io;
pub mod nn;
pub mod pointgfe;
pub mod roi_pooling;
pub mod spatial_index;
pub mod voxelgrid;

pub use depth_prior::{augment_points, sample_depth, Point5};
pub use error::{Error, Result};
pub use gated_fusion::{cascade, gated_fuse_stage, BgrfConfig, BgrfStageWeights, CascadeOutput, GateMode};
pub use geometry::{canonicalize, points_in_box, Box3D, PixelCoord};
pub use kitti_io::{CalibrationSet, DepthRaster, LabeledBox, ObjectClass, RawPoint};
pub use nn::{Tensor, WeightBundle};
pub use pointgfe::{pointgfe_stack, PointEmbedding, PointGFEConfig};
pub use roi_pooling::{extract_roi_features, FeatureVolume, RoiFeatures, RoiPoolConfig, VolumeTag};
pub use spatial_index::{ball_query, ball_query_bruteforce, GridHashIndex, Neighbors};
pub use voxelgrid::{voxelize, GridSpec, SparseVoxelMap};
