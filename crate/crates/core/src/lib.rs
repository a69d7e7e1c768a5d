//! Warmup-sequence training for small sequence-to-sequence transformers.
//!
//! The model first samples a short latent "warmup" sequence, a separator is
//! appended, and the target is then generated conditioned on the input and
//! the warmup. Training minimises the Monte Carlo average, over sampled
//! warmups, of the target's conditional negative log-likelihood.
//!
//! This crate is `no_std` + `alloc`. It carries the numeric substrate
//! ([`tape`], [`tensor`], [`adam`]), the transformer ([`model`]), warmup
//! sampling and decoding ([`decoding`]), the training objectives
//! ([`training`]), synthetic tasks ([`tasks`]), metrics ([`metrics`]) and the
//! exact-enumeration oracle ([`oracle`]). File formats, the CLI and the
//! experiment harness live in the `warmgen` crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod adam;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod training;
pub mod vocab;

mod kernels;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
