//! Core of the Mogo text-to-motion pipeline.
//!
//! Everything here is `no_std` + `alloc`: the tensor engine with reverse-mode
//! autodiff, the residual VQ-VAE tokenizer, the hierarchical causal
//! transformer, sampling, and the evaluation metrics. File formats, HTTP and
//! the command line live in the `mogo` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod eval;
pub mod generate;
pub mod hct;
pub mod kernels;
pub mod linalg;
pub mod motion;
pub mod optim;
pub mod prompt;
pub mod rng;
pub mod rvq;
pub mod tape;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tape::{ConvSpec, Gradients, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
