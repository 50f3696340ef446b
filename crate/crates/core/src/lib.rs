//! Numerical core of a hierarchical vision-Mamba flare-removal network.
//!
//! Layers, bottom up:
//! - [`tensor`] and [`autodiff`]: dense `f64` arrays and a reverse-mode tape.
//! - [`ssm`]: zero-order-hold diagonal state space models and the selective scan.
//! - [`scan`]: 2D-to-1D scan orders, the local-window four-direction scan and
//!   the stride-sampled hierarchical scan.
//! - [`vssm`]: dual-branch vision state space modules, residual blocks and groups.
//! - [`net`]: the U-shaped network, its parameters and checkpoints.
//! - [`data`]: synthetic flare pairs; [`ppm`] image I/O.
//! - [`train`] and [`metrics`]: losses, Adam, the training loop, PSNR and SSIM.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod params;
pub mod ppm;
pub mod scan;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod vssm;

pub use error::{Error, Result};
pub use tensor::Tensor;
