//! Dense `f64` tensors, a reverse-mode tape, momentum SGD and gradient checking.

mod conv;
mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::SgdOptimizer;
pub use tape::{log_sum_exp, sigmoid, softmax, Tape, Var};
pub use tensor::Tensor;
