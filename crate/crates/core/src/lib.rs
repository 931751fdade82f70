//! Binarized image restoration built from basic binary convolution units.
//!
//! The crate is `no_std` (it needs `alloc`) and carries all of the numeric
//! machinery: dense tensors and the float convolution oracle, sign/weight
//! binarization with straight-through gradients, bit-packed XNOR/popcount
//! convolution, the BBCU block family, four-part restoration networks,
//! desk-scale training, and the cost/quality metrics. IO, configuration
//! files, the model container and the CLI live in the `bbcu` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bbcu;
pub mod binarize;
pub mod bitkernel;
mod error;
pub mod metrics;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Tensor};
