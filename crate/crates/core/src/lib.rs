//! Desk-scale testbed for background parameter synchronization in
//! click-through-rate model training.
//!
//! Trainers run lock-free (Hogwild) worker roles over a shared dense
//! replica and sharded embedding parameter servers, while a background
//! "shadow" role synchronizes the dense replicas via EASGD, model
//! averaging, or BMUF. The same kernels can instead run in the foreground,
//! inside the training loop, for comparison.

pub mod data;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod hash;
pub mod model;
pub mod num;
pub mod runtime;
pub mod sync;
pub mod transport;

pub use error::{Error, Result};

/// Concrete scalar used by the runtime and CLI. The core math is generic
/// over [`num::Scalar`]; `f64` keeps the oracle comparisons exact.
pub type Real = f64;
