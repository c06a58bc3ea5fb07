//! Selective state space models for image classification, built on a small
//! tape-based autodiff engine.

pub mod autodiff;
pub mod io;
pub mod mixer;
pub mod model;
pub mod multipath;
pub mod params;
pub mod selftest;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use tensor::{DType, Element, Tensor, TensorError};
