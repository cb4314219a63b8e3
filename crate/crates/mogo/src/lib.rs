//! File formats, checkpoints, configuration, the prompt gateway's HTTP
//! backend and the training/generation pipeline on top of `mogo-core`.

pub use mogo_core as core;

pub mod ckpt;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod gateway;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
