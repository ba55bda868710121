//! Circle loss and RepVGG structural re-parameterization.
//!
//! The convolution and batch-norm forwards here are direct-summation
//! references; they exist to check that a fused block computes exactly what
//! its branches compute.

mod circle;
mod conv;
mod repvgg;
pub mod tensor;

pub use circle::{circle_loss, class_cosines, CircleLoss, CircleLossParams};
pub use conv::{batchnorm_forward, conv2d_forward, BatchNorm, Tensor4};
pub use repvgg::{
    fold_bn_into_conv, fuse_repvgg_block, load_block_manifest, random_block, BlockManifest, BranchKernel, ConvBranch,
    FusedConv, RepVggBlock,
};

/// Floating-point element type for the kernels (`f32` or `f64`).
pub trait Real: num_traits::Float + num_traits::FromPrimitive + Send + Sync + std::fmt::Debug + 'static {}

impl Real for f32 {}
impl Real for f64 {}
