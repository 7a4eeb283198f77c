//! Diagnostic mixture-of-experts video quality assessment.
//!
//! A shared patch-embedding extractor feeds three domain experts (spatial,
//! colour, temporal); a two-pathway slow/fast aggregator fuses their features
//! and a dual head predicts a global quality score plus a per-artifact
//! probability vector. The crate also contains the synthetic data lab used to
//! train it, the three-stage training engine, whole-video inference and the
//! evaluation metrics.

pub mod error;
pub mod harness;
pub mod lab;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod train;
pub mod video;

pub use error::{Error, Result};
pub use video::{FrameSequence, RangeTag};
