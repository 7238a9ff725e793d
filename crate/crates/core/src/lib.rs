//! Online test-time adaptation on a small from-scratch classifier.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a define-by-run reverse-mode tape over dense `f64` arrays.
//! - [`model`]: the backbone/head classifier with per-feature normalization.
//! - [`bank`]: memory bank, entropy-filtered prototypes, prototype
//!   classification and nearest-neighbour retrieval.
//! - [`losses`]: self-distillation, local clustering and baseline objectives.
//! - [`adapt`]: Adam, source training and the online adaptation loop.
//! - [`data`]: seeded synthetic multi-domain benchmarks and batch streams.

pub mod adapt;
pub mod autodiff;
pub mod bank;
pub mod data;
pub mod losses;
pub mod model;

mod error;

pub use error::{Error, Result};
