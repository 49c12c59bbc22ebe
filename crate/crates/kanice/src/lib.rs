//! KANICE-family image classifiers built from scratch: dense tensors with
//! reverse-mode autodiff, B-spline function bases, interactive convolutional
//! blocks, full and compact Kolmogorov-Arnold linear layers, the six
//! baseline architectures, and the training / adversarial-robustness /
//! statistics tooling around them.
//!
//! The crate is generic over the floating-point element type: `f32` is the
//! training precision, `f64` is used by gradient checks and statistics.

pub mod data;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod math;
pub mod model;
pub mod rng;
pub mod spline;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Dtype, Element, Tensor};
