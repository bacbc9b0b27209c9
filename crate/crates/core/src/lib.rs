//! Relational object matching.
//!
//! Learns per-object features from appearance and box geometry, refines them
//! with alternating self/cross attention across an image pair, and solves a
//! partial assignment with outlier bins by log-domain Sinkhorn iterations.
//! Keypoint evidence can be fused into the assignment scores.
//!
//! The crate is `no_std` (it needs `alloc`). File formats and the command-line
//! front end live in the `rom` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod agnn;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod matcher;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use real::Real;
pub use tensor::Tensor;
