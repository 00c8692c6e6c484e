//! Reverse-mode automatic differentiation over dense tensors, plus SGD.

mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{sgd_step, ParamSet, Sgd, SgdConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
