//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] evaluates primitives eagerly and remembers how each value was
//! produced. [`Tape::backward`] walks that record in reverse and returns the
//! gradient of a scalar with respect to every [`LeafId`] registered on the
//! tape. The primitive set is deliberately small: it is exactly what the
//! classifier and the noise-aware losses need.

mod check;
mod tape;

pub use check::finite_diff_check;
pub use tape::{Gradients, LeafId, Tape, Var};

pub(crate) use tape::row_softmax;

/// Probabilities are clamped to at least this value before a log.
pub const LOG_FLOOR: f64 = 1e-12;
