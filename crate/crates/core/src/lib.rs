//! Prior-assisted attentional keypoint matching.
//!
//! The pipeline takes two keypoint sets with descriptors, builds spatial
//! distribution priors from a motion prior (IMU integration, a given
//! relative pose, or a homography), refines descriptors with alternating
//! self-/cross-attention layers, scores candidate pairs, and solves a
//! dustbin-augmented optimal transport problem with the Sinkhorn
//! algorithm. Training differentiates through the whole pipeline with a
//! tape-based reverse-mode engine.

pub mod assignment;
pub mod engine;
pub mod features;
pub mod geometry;
pub mod gnn;
pub mod imu;
pub mod io;
pub mod losses;
pub mod mat;
pub mod metrics;
pub mod pipeline;
pub mod prior;
pub mod synth;
pub mod tape;
pub mod train;

pub use features::FeatureSet;
pub use geometry::{CameraIntrinsics, Homography, Pose};
pub use mat::Mat;
