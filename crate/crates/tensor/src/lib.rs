//! Dense tensors, a reverse-mode gradient tape and the optimizers used to
//! train the dialog models.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root pin the common choices.

mod error;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};
pub use params::{Grads, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{GradMode, Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
