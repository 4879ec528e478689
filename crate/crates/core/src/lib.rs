//! Streaming blind source separation with online AuxIVA.
//!
//! The crate provides an online separator whose demixing matrices are
//! updated either by iterative projection (IP) or by the inverse-free
//! iterative source steering (ISS) rule, a batch AuxIVA reference, an
//! STFT front end, synthetic moving-source scenarios and segmental SDR
//! evaluation. See the `examples/` directory for one runnable program per
//! capability and the `auxiva` binary for the command-line workflow.

// `!(x <= y)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod audio;
pub mod batch;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod scenario;
pub mod separator;
pub mod stft;

pub use error::{Error, Result};
