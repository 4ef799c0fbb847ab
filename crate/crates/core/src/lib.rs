//! Dynamic part-based single-object tracker.
//!
//! The crate carries its own reverse-mode autodiff ([`numerics`]), box and
//! crop geometry, the part-based model, its losses, a training loop, the
//! online tracker, a synthetic sequence generator and the evaluation metrics.

pub mod alloc;
pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod tracking;
pub mod training;

pub use error::{Error, Result};
