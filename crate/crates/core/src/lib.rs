//! Compact convolutional classifiers built from wide MBConv stages with
//! channel and spatial attention, plus the tensor engine, training loop and
//! image pipeline they need.

pub mod attention;
pub mod block;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod par;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Padding, Scalar, Tape, Tensor, Var};
