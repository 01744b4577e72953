//! Deterministic desk-scale simulator of cross-silo federated MRI-to-CT
//! synthesis.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod dataset;
pub mod error;
pub mod federation;
pub mod inference;
pub mod logs;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod seed;
pub mod slicing;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
