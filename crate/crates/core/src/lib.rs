//! Core of the CANOE next-location predictor.
//!
//! Everything in this crate is allocation-only (`no_std` + `alloc`): the
//! reverse-mode differentiation engine, the model components (smoothed time
//! embeddings, the user-location topic model, chaotic neural oscillatory
//! attention, the tri-pair encoder and the cross-context decoder), the
//! trajectory pipeline, the Markov baseline, metrics and the training loop.
//! File formats, configuration parsing and the command line live in the
//! `canoe` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cnoa;
pub mod data;
pub mod decoder;
pub mod embeddings;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod graph;
mod math;
pub mod metrics;
pub mod mmc;
pub mod nn;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod topics;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamRegistry};
pub use tensor::Tensor;
