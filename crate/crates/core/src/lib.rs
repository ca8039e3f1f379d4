//! Memory-based visually-similar pair alignment for cross-domain object
//! detection, at desk scale.
//!
//! The crate covers a synthetic two-domain benchmark, a small differentiable
//! detector, source feature memories with exact cosine retrieval, the
//! alignment losses, and the training and evaluation loops.

pub mod error;
pub mod alignment;
pub mod detector;
pub mod eval;
pub mod memory;
pub mod numerics;
pub mod par;
pub mod retrieval;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
