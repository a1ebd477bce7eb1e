//! Volumetric vessel segmentation toolkit.
//!
//! Builds a U-shaped 3D shifted-window transformer with inductive-biased
//! multi-head self-attention, together with the full surrounding pipeline:
//! CT-style preprocessing, window/bias machinery, weighted dice loss,
//! connected-component post-processing, an analytical attention cost model,
//! and a synthetic-phantom training and evaluation harness.

pub mod attention;
pub mod loss;
pub mod postprocess;
pub mod profiler;
pub mod tensor;
pub mod volume;
pub mod windowing;

pub use tensor::{Scalar, Tensor};
