//! Full-volume 3D segmentation with a multi-branch high-resolution FCN.
//!
//! The crate is organized bottom-up:
//!
//! - [`volio`]: volume containers, the VVOL and NIfTI-1 readers, z-score
//!   normalization and one-hot encoding.
//! - [`tensor`]: rank-5 tensors, 3D layer operations and a reverse-mode tape.
//! - [`halfprec`]: software FP16, loss scaling and the precision policy.
//! - [`network`]: the multi-resolution network, parameter counting and
//!   checkpoints.
//! - [`losses`]: cross-entropy, soft Dice and their sum.
//! - [`augment`]: additive Gaussian noise and elastic deformation.
//! - [`metrics`]: Dice, Hausdorff distance, aggregation and a paired t-test.
//! - [`optim`], [`train`]: RAdam, the training loop and inference.
//! - [`config`], [`cli`]: flat `key = value` configuration and the command
//!   line front end.

pub mod augment;
pub mod cli;
pub mod config;
pub mod halfprec;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod volio;

pub use halfprec::{Half, LossScaler, PrecisionLevel, PrecisionPolicy};
pub use network::{Network, NetworkConfig};
pub use tensor::{Tape, Tensor, Var};
pub use volio::{LabelVolume, Volume};
