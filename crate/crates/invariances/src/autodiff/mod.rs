//! Reverse-mode automatic differentiation on dense tensors.
//!
//! The engine is define-by-run: every training step builds a fresh
//! [`Tape`] by calling op methods, then sweeps it once with
//! [`Tape::backward`]. Trainable state lives in [`Param`] handles that
//! outlive tapes and accumulate gradients until zeroed, which makes
//! multi-network setups (several optimizers over overlapping parameter
//! sets) straightforward: each update builds its own tape, registering
//! exactly the parameters it trains and freezing the rest.

pub mod gradcheck;
mod ops;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub(crate) use tape::Op;

pub use ops::{BatchStats, BCE_EPS};
pub use optim::{RmsProp, RmsPropConfig};
pub use scalar::{Dtype, Scalar};
pub use tape::{NodeId, Param, Tape};
pub use tensor::Tensor;
