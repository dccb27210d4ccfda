//! Dense `f64` tensors with tape-based reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use ops::{
    add_bias, conv2d, cross_entropy_per_example, flatten, kl_divergence, log_softmax, matmul,
    matmul_nt, maxpool2d, relu, soft_cross_entropy, softmax_t,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, Tensor};
