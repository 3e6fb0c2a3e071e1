//! Minimal dense numeric kernel: arrays, eager reverse-mode tape, and a
//! finite-difference oracle.

mod array;
mod gradcheck;
pub(crate) mod ops;
mod tape;

pub use array::DenseArray;
pub use gradcheck::{fd_check, fd_compare, FdReport, DEFAULT_STEP};
pub use ops::{entropy, gelu, gelu_grad, softmax, softmax_rows};
pub use tape::{Gradients, Tape, Var};
