//! Recurrent correlation-volume optical flow estimation from event camera
//! streams, with differentiable warm-starting, sequence training, ground-truth
//! flow generation from disparity and odometry, and an EPE/NPE evaluation
//! harness. Everything runs on the CPU in 64-bit floats with deterministic,
//! seedable behaviour.

pub mod autodiff;
pub mod cli;
pub mod events;
pub mod flow;
pub mod geometry;
pub mod dataset;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod training;
pub mod viz;
pub mod error;
pub mod tensor;
pub mod warmstart;

pub use error::{Error, Result};
pub use tensor::Tensor;
