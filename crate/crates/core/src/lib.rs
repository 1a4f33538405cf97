//! Slice-to-volume reconstruction with deformable 2D Gaussian splatting.
//!
//! An anisotropic stack of grayscale slices is treated as the axial evolution of
//! a single 2D Gaussian point cloud. A canonical set of Gaussians is deformed by
//! a small frequency-encoded MLP conditioned on the normalized depth `t`, and the
//! deformed set is composited front to back into a slice. Training runs in three
//! stages (canonical warm-up, joint, and EMA teacher-student bootstrapping) and
//! the trained model can synthesize slices at any `t` in `[0, 1]`.
//!
//! Module map:
//! - [`gaussian`]: primitives, covariance, deformation, timestamps
//! - [`raster`]: tile-binned compositing and its analytic backward pass
//! - [`deform`]: the deformation network and its backward pass
//! - [`optim`]: Adam, learning-rate schedules, density control
//! - [`train`]: losses and the staged training loop
//! - [`volume`]: slice stacks, phantoms, PGM/PNG IO, baselines
//! - [`config`]: run manifests
//! - [`pipeline`]: datasets, inference and evaluation helpers
//! - [`metrics`]: MSE, PSNR, SSIM
//! - [`checkpoint`]: binary checkpoint format

pub mod checkpoint;
pub mod config;
pub mod deform;
pub mod error;
pub mod gaussian;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use image::Image;
