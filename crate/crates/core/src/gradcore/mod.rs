//! Dense tensors, a define-by-run reverse-mode tape, Adam, and finite-difference
//! gradient checking.

mod adam;
pub mod check;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use scalar::Scalar;
pub use tape::{OpKind, SoftmaxMask, Tape, Var, MASK_SENTINEL};
pub use tensor::{ParamId, ParamStore, Tensor};

#[cfg(test)]
mod tests;
