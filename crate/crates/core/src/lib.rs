//! Dual-modality (RGB + infrared) small-object detection at desk scale.
//!
//! The crate packages the pieces as independently testable differentiable
//! blocks on a small reverse-mode autodiff engine:
//!
//! - [`ssm`]: the selective state-space scan and its bidirectional wrapper,
//!   with a naive recurrence kept as the correctness oracle.
//! - [`dgc_mfm`]: the dual-gated complementary Mamba fusion module
//!   (illumination gate, difference gate, gated fusion, Mamba refinement,
//!   residual integration, fusion-shuffle).
//! - [`hfan`]: the hierarchical feature aggregation neck built from
//!   content-reconstruction upsampling, geometric-alignment downsampling and
//!   adaptive weighted fusion.
//! - [`detector`]: toy dual-stream backbone, neck variants, decoupled
//!   anchor-free heads, loss, decoding and NMS.
//! - [`datagen`]: synthetic RGB+IR scene generation and YOLO-format loading.
//! - [`eval`]: IoU, mAP@.5, parameter counting and the gradient checker.
//! - [`train`] / [`ablate`]: training loop, checkpoints, reports, and the
//!   ablation grids.

pub mod ablate;
pub mod boxes;
pub mod datagen;
pub mod detector;
pub mod dgc_mfm;
pub mod error;
pub mod eval;
pub mod hfan;
pub mod nn;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{FuseError, Result};
