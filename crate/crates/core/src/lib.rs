//! Convolutional encoder-decoder + vision transformer for CW radar hand-gesture
//! recognition, trained from scratch with hand-written adjoints.

pub mod cli;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod radar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};

/// Number of gesture classes.
pub const NUM_CLASSES: usize = 14;
