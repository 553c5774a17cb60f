//! Minimal CPU autodiff for training small convolutional networks.
//!
//! Tensors are dense row-major arrays; convolutions run as im2col followed
//! by a single GEMM per image. Everything is generic over [`Float`] so the
//! same model code can be evaluated in `f64` for finite-difference checks.

mod conv;
mod float;
mod optim;
mod param;
mod tape;
mod tensor;

pub use float::{matmul, Float, Layout};
pub use optim::{Adam, AdamConfig};
pub use param::{Param, ParamGrads, ParamId, ParamStore};
pub use tape::{bilinear_taps, Gradients, Tape, Var};
pub use tensor::Tensor;
