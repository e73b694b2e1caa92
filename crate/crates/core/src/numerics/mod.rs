//! Dense tensors, deterministic random streams and reverse-mode autodiff.

mod gradcheck;
pub(crate) mod kernels;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use rng::{Rng, RngState};
pub use tape::{Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
