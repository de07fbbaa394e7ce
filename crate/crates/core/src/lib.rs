//! Multi-task collaborative network for joint referring expression
//! comprehension (box) and segmentation (mask), with a small autodiff engine,
//! a synthetic shapes dataset, and training/evaluation harness.

pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod params;
pub mod postprocess;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
