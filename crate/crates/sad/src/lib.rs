//! Adaptive distillation for dense single-stage detectors, at desk scale.
//!
//! The crate provides the loss kernels (focal, binary KL, adaptive
//! distillation and its baselines) with analytic gradients verified against
//! finite differences, a synthetic detection world with a toy dense
//! detector, teacher-side inference with threshold calibration,
//! transfer-set construction for semi-supervised distillation, and
//! COCO-style average-precision evaluation.
//!
//! Start with the runnable programs under `examples/`; the `sad` binary
//! drives the same pipeline from the command line.

pub mod anchors;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod scene;
pub mod semisup;
pub mod train;
pub mod teacher;

pub use error::{Error, Result};
