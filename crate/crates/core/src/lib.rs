//! Numeric core for novel class discovery without forgetting.
//!
//! Everything here needs only `alloc`: a small reverse-mode autodiff tape,
//! dense networks, the Sinkhorn self-labeler, latent inversion for replay,
//! the mutual-information regularizer, the known-class identifier, the
//! two-phase trainer and the evaluation protocols.

#![no_std]

extern crate alloc;

pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod kci;
pub mod miregularizer;
pub mod models;
pub mod nn;
pub mod optim;
pub mod pseudoreplay;
pub mod selflabel;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
