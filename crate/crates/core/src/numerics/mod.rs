//! Dense `f64` tensors and a reverse-mode tape restricted to trainable leaves.

mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::{Adam, Sgd};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
