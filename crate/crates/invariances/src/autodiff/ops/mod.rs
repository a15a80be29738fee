//! Differentiable operations, implemented as methods on
//! [`Tape`](crate::autodiff::Tape). Each submodule pairs a forward
//! implementation with the op's saved backward rule.

mod batchnorm;
mod conv;
mod elementwise;
mod linear;
mod loss;
mod pool;

pub use batchnorm::BatchStats;
pub use loss::BCE_EPS;
