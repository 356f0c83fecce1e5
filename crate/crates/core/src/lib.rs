//! Hypercolumn image classification on a from-scratch autograd engine.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] and [`tape`]: dense NCHW tensors and reverse-mode autodiff.
//! * [`nn`]: convolution, pooling, upsampling, batch norm, linear, loss.
//! * [`model`]: a ResNet-18 style backbone with named tap points, the
//!   hypercolumn head and the global-pool baseline head.
//! * [`data`]: synthetic class × context images, manifests, domain splits.
//! * [`train`]: SGD with step decay, evaluation and checkpoints.
//! * [`saliency`]: input-gradient saliency maps.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod saliency;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Fill, Scalar, Shape, Tensor};
