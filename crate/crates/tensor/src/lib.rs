//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! Values live in [`Tensor`]; differentiable programs are recorded on a
//! [`Tape`] one primitive at a time and differentiated with
//! [`Tape::backward`]. The tape is generic over [`Scalar`] so the same model
//! code runs in `f32` for training and in `f64` for finite-difference checks.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
mod params;
mod scalar;
pub mod sparse;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use params::{BoundParams, ParamId, ParamStore};
pub use scalar::Scalar;
pub use sparse::CsrMatrix;
pub use tape::{Gradients, Reduction, Tape, Var};
pub use tensor::Tensor;
