//! Minimal dense tensors with tape-based reverse-mode autodiff, enough to
//! train a small vision transformer on the CPU.

pub mod checkpoint;
mod error;
pub mod nn;
pub mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{AdamWConfig, OptimState};
pub use params::{Bound, ParamSet};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
