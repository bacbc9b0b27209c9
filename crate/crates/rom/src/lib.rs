//! File formats and command-line front end for `rom-core`.
//!
//! Corpora, keypoint files and match outputs are JSON Lines; checkpoints and
//! feature sidecars are a JSON header followed by little-endian `f32` data.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod records;
pub mod report;
pub mod svg;

pub use error::{Error, Result};
