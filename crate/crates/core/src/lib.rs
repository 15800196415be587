//! Desk-scale RGBD semantic segmentation with an attention-based dual
//! supervised decoder, on top of a small reverse-mode tensor engine.

pub mod attention;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
