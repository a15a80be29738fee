//! Extracting learned invariances from a trained convolutional network.
//!
//! A trained CNN maps many inputs to the same prediction; the set of filter
//! banks that leave its behaviour unchanged is a window into *which*
//! transformations it has learned to ignore. This crate implements the full
//! pipeline for making that set visible:
//!
//! 1. [`autodiff`] — a small reverse-mode tensor engine (conv, batch norm,
//!    pooling, losses, RMSprop) that runs `f32` for training and `f64` for
//!    gradient checking on identical code paths.
//! 2. [`mnist`] — IDX ingestion and deterministic minibatching.
//! 3. [`cnn`] — a five-block convolutional classifier with checkpointing
//!    and layer-wise filter substitution.
//! 4. [`filtergan`] — the core contribution: an adversarial game that
//!    trains a generator to emit *replacement filter banks* for one layer
//!    of the frozen classifier, judged by a discriminator that watches
//!    activations, plus a recovery head that keeps the latent space
//!    meaningful.
//! 5. [`inversion`] — visualization of the captured invariances by latent
//!    traversal and activation-matching image reconstruction under a
//!    natural-image prior.
//! 6. [`evaluation`] — quantitative checks: filter-averaged accuracy with
//!    tail retraining, generator diversity, and a low-dimensional map of
//!    the filter space via classical MDS ([`mds`]).

pub mod autodiff;
pub mod checkpoint;
pub mod cnn;
pub mod error;
pub mod evaluation;
pub mod filtergan;
pub mod inversion;
pub mod mds;
pub mod mnist;
pub mod rng;

pub use autodiff::{Dtype, NodeId, Param, RmsProp, RmsPropConfig, Scalar, Tape, Tensor};
pub use error::{Error, Result};
