//! Simulators and exact solvers for the frog model on rooted trees.

pub mod error;
pub mod rng;
pub mod treegen;
pub mod walks;
pub mod frog;
pub mod truncated;
pub mod harmonic;
pub mod brw;
pub mod stats;
pub mod harness;

pub use error::{Error, Result};
