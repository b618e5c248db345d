//! Dense-matrix substrate: matrices, seeded RNG, optimizers and the
//! finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod optim;
mod rng;

pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport};
pub use matrix::{
    dot, log_sigmoid, log_sum_exp, sigmoid, softmax_into, softmax_rows, softmax_rows_backward,
    Matrix,
};
pub use optim::{Optimizer, OptimizerKind};
pub use rng::{derive_seed, fnv1a64, Rng};
