//! Audio-guided multi-face reenactment with adaptive convolution.

pub mod adaconv;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fuser;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod reenactor;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{no_grad, Real, Tensor};
