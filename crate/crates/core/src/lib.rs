//! Hierarchical context-alignment pipeline for semantic occupancy
//! prediction, driven end to end by a synthetic-scene oracle instead of
//! trained networks.
//!
//! The crate is organized bottom-up:
//! - [`numerics`]: dense arrays, softmax, resampling, scatter-add, dilated
//!   3D convolution;
//! - [`geometry`]: cameras, poses, depth hypothesis planes, homography
//!   warping;
//! - [`lifting`]: depth-confidence-aware lifting of image features into a
//!   frustum voxel volume;
//! - [`temporal`]: plane-sweep construction of temporal feature and cost
//!   volumes;
//! - [`alignment`]: multi-group dilated contexts, cross-frame pattern
//!   affinity and affinity-gated deformable refinement;
//! - [`compose`]: voxel pooling into the unified grid, zero-gated
//!   composition, semantic head, losses and IoU/mIoU metrics;
//! - [`scenes`]: procedural scenes, ray-cast renderer and ground-truth
//!   voxelization;
//! - [`config`], [`pipeline`], [`io`], [`selftest`]: run configuration,
//!   end-to-end orchestration, file formats and the acceptance checks.

pub mod alignment;
pub mod compose;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod lifting;
pub mod numerics;
pub mod pipeline;
pub mod scenes;
pub mod selftest;
pub mod temporal;

pub use error::{Error, Result};
pub use geometry::{
    build_hypotheses, DepthHypothesisSet, Intrinsics, RigidPose, Spacing,
};
pub use numerics::{BorderPolicy, Conv3DKernel, DenseArray};
