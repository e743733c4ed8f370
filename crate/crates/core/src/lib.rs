//! Vector-quantized semantic segmentation.
//!
//! A U-shaped CNN + interpatch-attention encoder/decoder whose bottleneck
//! features are snapped to a learned codebook, together with the small
//! reverse-mode substrate it runs on, the data pipeline, metrics and the
//! training loop.

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod quantizer;
pub mod selftest;
pub mod substrate;
pub mod trainer;

pub use error::{Error, Result};
