//! Binary neural network training and bit-packed deployment.
//!
//! Trains CNNs whose middle layers use binary weights and activations via the
//! straight-through estimator, then exports them to a packed format executed
//! with xnor/popcount arithmetic that is bit-exactly equivalent to the +-1
//! float formulation.

pub mod arch;
pub mod binarize;
pub mod data;
pub mod error;
pub mod kernels;
pub mod modelio;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
