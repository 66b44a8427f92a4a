//! Masked time-series pretraining with a spectral decoder.
//!
//! The model embeds non-overlapping windows of a series, masks most
//! tokens, encodes the visible ones with a transformer, and reconstructs
//! the series through two decoders: a vanilla transformer in the time
//! domain, and a stack of spectral blocks that modulate and rebalance the
//! DFT of the restored token sequence. Both reconstructions are penalized
//! in both domains.

pub mod backbone;
pub mod cbd;
pub mod cim;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod run;
pub mod ser;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Mat;
