//! Tensors, layer kernels with hand-written backward passes, Adam, and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_at, Differentiable, GradCheckReport,
};
pub use optim::{adam_step, AdamConfig, Parameter};
pub use tensor::{Scalar, Tensor};
