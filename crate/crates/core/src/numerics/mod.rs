//! Dense tensors, tape-based reverse-mode differentiation, SGD, and the
//! finite-difference checker used to validate every differentiable op.

pub mod checkpoint;
pub mod gradcheck;
pub mod sgd;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradReport};
pub use sgd::{sgd_step, SgdConfig, SgdState};
pub use tape::{Tape, Var, COSINE_EPS, PROB_CLAMP};
pub use tensor::{Scalar, Tensor};
