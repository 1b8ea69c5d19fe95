//! Vertical federated learning over partitioned alarm data: dataset
//! preparation, additively homomorphic encryption, histogram gradient
//! boosting, split neural networks and an in-process federation runtime.

pub mod dataset;
pub mod error;
pub mod federation;
pub mod fedtree;
pub mod gbdt;
pub mod harness;
pub mod nn;
pub mod paillier;
pub mod splitnn;

pub use error::{Error, Result};
