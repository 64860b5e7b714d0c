//! Limited-precision emulation, quantization flow and fine-tuning for small
//! convolutional networks.

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod io;
pub mod kernels;
pub mod network;
pub mod numerics;
mod serde_u64;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
