//! Federated learning over lossy channels: objectives, delay process, aggregation rules,
//! convergence bounds and an experiment harness.

pub mod bounds;
pub mod delay;
pub mod error;
pub mod harness;
pub mod objective;
pub mod training;

pub use error::{Error, Result};
