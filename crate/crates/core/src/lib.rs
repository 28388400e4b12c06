//! Modality-gap preservation and compensation for class-incremental learning
//! on small synthetic dual encoders.

pub mod compensation;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gapmetrics;
pub mod linalg;
pub mod preservation;
pub mod protocol;
pub mod subspace;

pub use error::{Error, Result};
