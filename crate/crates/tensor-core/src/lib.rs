//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are immutable row-major `f64` buffers (1-D or 2-D). A [`Tape`]
//! records every operation whose inputs require gradients; [`Tape::gradients`]
//! replays the record in reverse to produce exact gradients of a scalar loss.
//! [`gradcheck`] provides the central finite-difference oracle used to verify
//! every kernel.
//!
//! Tensors share their buffers behind `Arc` and are safe to read from any
//! thread. A tape is single-threaded (`Send` but not `Sync`); independent
//! tapes can run in parallel.

mod error;
pub mod gradcheck;
pub mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{Gradients, Tape, LN_EPS};
pub use tensor::Tensor;
