//! Bottleneck adapters plugged into a frozen encoder-decoder transformer for
//! multi-attribute text style transfer.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod adapters;
pub mod auxmodels;
pub mod backbone;
pub mod composition;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod init;
mod layers;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
