//! Functional subspace watermarking for a small autoregressive language model.

pub mod adapter;
pub mod attacks;
pub mod error;
pub mod linalg;
pub mod geometry;
pub mod model;
pub mod subspace;
pub mod verify;
pub mod watermark;

pub use error::{Error, Result};
