//! Class-incremental continual learning at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine, an MLP model with
//! an expanding classifier (optionally gated per past task), the
//! margin-dampening objective with a teacher KL regularizer, a class-balanced
//! rehearsal memory, baseline strategies and the metrics used to compare them.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod scenario;
pub mod strategies;

pub use error::{Error, Result};
