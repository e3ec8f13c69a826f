//! A Fully Convolutional Transformer for 2-D image segmentation, built on a
//! small self-contained tensor and reverse-mode autodiff core.
//!
//! Layout is NHWC everywhere. Start with [`model::FctModel`] for the network,
//! [`train`] for the training loop, and the crate's `examples/` directory for
//! one runnable program per capability.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod fctt;
pub mod gradcheck;
pub mod kernels;
pub mod layer;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod profile;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod wide_focus;

pub use error::{FctError, Result};
pub use tape::{ConvSpec, Gradients, Tape, Var};
pub use tensor::{Element, Tensor};
