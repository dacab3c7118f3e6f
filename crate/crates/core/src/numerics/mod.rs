//! Dense-tensor arithmetic with reverse-mode differentiation.
//!
//! Every learnable block in the teacher and student is assembled from the
//! operations in this module, so each one carries a hand-written backward
//! rule and is checked against finite differences (see [`gradcheck`]).
//!
//! The engine is define-by-run: a [`Tape`] is rebuilt for every training
//! step, ops push nodes onto it, and [`Tape::backward`] walks the nodes in
//! reverse topological order exactly once. Tensors are immutable after
//! creation; parameter updates happen outside the tape.

mod ops;
mod ops_nn;
mod scalar;
mod tape;
mod tensor;

pub mod gradcheck;

pub use scalar::{lit, Scalar};
pub use tape::{Tape, TensorId};
pub use tensor::TensorData;
