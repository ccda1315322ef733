//! Parameter-difference data filtering for instruction fine-tuning.
//!
//! Each training sample is scored by how much one optimizer step on that
//! sample alone moves the weights of a base model; the samples that move the
//! weights the most are dropped before the final fine-tune. A small
//! decoder-only transformer with exact gradients makes the whole pipeline
//! runnable on a laptop.

pub mod analysis;
pub mod bench;
pub mod cli;
pub mod dataio;
pub mod diffscore;
pub mod error;
pub mod filterpipe;
pub mod fsutil;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod train;

pub use error::{Error, Result};
