//! Dense tensors, a reverse-mode tape with hand-derived backward passes for
//! the primitives the pipeline needs, and a finite-difference checker.

mod gemm;
pub mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckReport, DEFAULT_STEP};
pub use tape::{Diagnostics, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
