//! Differentiable cell search for unsupervised domain adaptation.
//!
//! The crate has two phases built on a small reverse-mode autodiff engine:
//!
//! 1. [`search`]: a bilevel search over a continuous relaxation of a
//!    convolutional cell. The architecture gradient combines the source
//!    validation loss through a one-step unrolled weight update with a
//!    multi-kernel MMD penalty ([`mmd`]) between source and target features.
//! 2. [`adapt`]: the discretized cell ([`search_space::Genotype`]) is stacked
//!    into a feature generator that is trained adversarially against a bank of
//!    classifiers whose pairwise L1 disagreement on target data it minimizes.
//!
//! [`data`] provides seeded synthetic domain pairs and an IDX reader;
//! [`checkpoint`] the binary container both phases persist to.

pub mod adapt;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mmd;
pub mod optim;
pub mod params;
pub mod search;
pub mod search_space;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
