//! Cooperation of experts for node classification on multiplex networks.
//!
//! The pipeline refines each layer's graph, trains one expert per layer plus
//! fused high-level experts with a mutual-information objective, and combines
//! expert opinions through a confidence tensor fit with a large-margin loss.

pub mod data;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod experts;
pub mod fusion;
pub mod mi;
pub mod numeric;
pub mod refinery;
pub mod theory;

pub use error::{CoeError, Result};
