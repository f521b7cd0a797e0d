//! Desk-scale ASR workbench: a transformer encoder-decoder with joint CTC
//! training and the full matrix of autoregressive and non-autoregressive
//! decoding strategies, centered on single-pass causal CTC refinement.

pub mod ctc;
pub mod data;
pub mod decode;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{NarError, Result};
