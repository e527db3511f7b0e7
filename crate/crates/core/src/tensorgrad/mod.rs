//! Reverse-mode automatic differentiation over dense rank-2 tensors.
//!
//! Every model equation in this crate is composed from the primitives on
//! [`Tape`]; [`grad_check`] verifies them against central differences in
//! `f64`.

mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{analytic_grads, grad_check, grad_check_entries, ScalarFn};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
