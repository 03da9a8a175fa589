//! Scene-flow estimation toolkit.
//!
//! The pipeline voxelizes five warped LiDAR frames, stacks them into a sparse
//! 4D tensor, runs a U-shaped stack of spatio-temporal coupling blocks, and
//! decodes per-point flow with an offset-conditioned selective state-space
//! scan over Morton-ordered points. Losses and the EPE metric suite are
//! provided for evaluation against synthetic scenes with known flow.

pub mod cli;
pub mod decoder;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pointcloud;
pub mod serialization;
pub mod ssm;
pub mod stdcb;
pub mod voxelizer;
pub mod weights;

pub use error::{Error, Result};
