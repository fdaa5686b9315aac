//! Simulation of product-line competition under conjoint-estimated preferences.

pub mod codec;
pub mod design;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod hbmxl;
pub mod market;
pub mod metrics;
pub mod nash;
pub mod prefgen;
pub mod respsim;
pub mod rng;

pub use error::{Error, Result};
