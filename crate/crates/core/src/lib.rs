//! Numerical core for few-shot segmentation with CAM-partitioned prior maps.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f32` tensors, binary masks and the handful of kernels
//!   the rest of the crate needs (masking, concat, 1x1 convolution, softmax,
//!   bilinear resize, region min-max normalisation).
//! - [`fst`]: the `FST1` binary tensor file format.
//! - [`pmgm`]: prior-map generation. Support and query are split into CAM+
//!   and CAM- regions, dual prototypes are pooled from the support, and the
//!   query is scored region by region with cosine similarity.
//! - [`attention`]: query-over-support cross-attention with the two masking
//!   strategies (pixel-wise directional masking and cycle-consistency column
//!   masking) and per-block mask accounting.
//! - [`metrics`]: IoU, mIoU, FB-IoU, prior cross-entropy and aggregation.
//! - [`episode`]: episode data model, synthetic generator, baseline prior,
//!   on-disk layout and the end-to-end pipeline.
//! - [`oracle`]: naive reference implementations and the oracle suites.

pub mod attention;
pub mod episode;
pub mod error;
pub mod fst;
pub mod metrics;
pub mod oracle;
pub mod pmgm;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{BinaryMask, Shape, Tensor};
