//! DeadNet: a from-scratch ConvNet for classifying phototoxicity in
//! label-free phase-contrast images, with the tooling around it.
//!
//! - [`tensor`]: dense tensors and differentiable ops with exact VJPs.
//! - [`model`]: the DeadNet architecture, initialization, checkpoints.
//! - [`trainer`]: Nesterov SGD with inverse learning-rate decay.
//! - [`augment`]: thin-plate-spline warps, dihedral flips, blur, crops, noise.
//! - [`interpret`]: Grad-CAM and class-model visualization.
//! - [`heatmap`]: sliding-window classification maps and overlays.
//! - [`stats`]: virtual-batch BCa bootstrap and annotation-ambiguity arithmetic.
//! - [`dataset`]: manifests, stage-position splits, image IO, synthetic proxy data.
//! - [`verify`]: finite-difference checks of every backward pass.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod heatmap;
pub mod interpret;
pub mod model;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{OpContext, Scalar, Tensor};
