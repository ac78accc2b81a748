//! Point-cloud learning with feature-adaptive graph convolution kernels.
//!
//! The crate is CPU-only and double-precision throughout: a small
//! reverse-mode autodiff engine, kNN/farthest-point-sampling graph machinery,
//! the adaptive convolution operator with its fixed-kernel and attention
//! baselines, classification/segmentation networks, and a training and
//! evaluation harness over synthetic datasets.

pub mod check;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod net;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Mode, Param, ParamStore, Pass, Tape, Tensor};
