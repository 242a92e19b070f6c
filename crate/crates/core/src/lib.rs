//! Masked-language-model pretraining with self-evolution learning, plus a
//! downstream adaptation suite, on a small fp64 autodiff engine.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evolution;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

/// `ceil(x)` for a count computed in floating point, ignoring representation
/// noise just above an integer (`0.1 * 30` is `3.0000000000000004`).
pub(crate) fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}
