//! Dual-path image classification engine with dynamic ROI routing.
//!
//! The pipeline wires a compact convolutional backbone into five heads:
//! a global classifier, a saliency-driven Top-K ROI branch feeding a fused
//! classifier, a routing head that predicts ROI necessity, and a domain
//! classifier trained through a gradient reversal layer against K-means
//! pseudo-domain labels. Inference gates the ROI branch on global-classifier
//! confidence so easy samples pay only for the global path.
//!
//! Everything runs on a minimal reverse-mode autodiff substrate in 32-bit
//! floats, seeded end to end for byte-reproducible runs.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod cluster;
pub mod degrade;
pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod imageio;
pub mod model;
pub mod loco;
pub mod rng;
pub mod train;
pub mod tensor;

pub use error::{CdiraError, Result};
pub use tensor::Tensor;
