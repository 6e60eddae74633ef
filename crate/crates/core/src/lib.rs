//! Heterogeneous collaborative BEV perception through a ground-truth-derived
//! common feature space.

pub mod agents;
pub mod alignment;
pub mod autograd;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gtspace;
pub mod head;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod scene;
pub mod seed;
pub mod tensor;
pub mod training;
pub mod workflow;

pub use error::{Error, Result};
