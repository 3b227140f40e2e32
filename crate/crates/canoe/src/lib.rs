//! File formats, pipelines and the command-line front end for the CANOE
//! next-location predictor. The numerics live in `canoe-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
