//! Dense forward math used by the encoders and the fusion cascade.
//!
//! Everything is computed in `f64`; weight files and feature dumps store
//! `f32`. Gradients exist only where a hand-derived backward pass is needed
//! for [`finite_diff_check`].

mod bundle;
mod gradcheck;
mod init;
pub(crate) mod ops;
mod tensor;

pub use bundle::WeightBundle;
pub use gradcheck::finite_diff_check;
pub use init::{seeded_init, ParamSpec, SplitMix64};
pub use ops::{
    affine_forward, conv3d_backward, conv3d_forward, conv_output_len, global_avg_pool, relu, sigmoid, Conv3dGrads,
};
pub use tensor::Tensor;
