//! Region-conditioned orthogonal residual 3D U-Net pipeline for binary
//! precipitation nowcasting.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`datagen`] — seeded synthetic storm sequences with region-dependent
//!   rain statistics, plus the on-disk dataset container.
//! - [`model`] — the residual 3D U-Net backbone with region-conditioned
//!   bottleneck modulation and FiLM adapter slots on the skip paths.
//! - [`orthoreg`] — the soft orthogonality penalty over 1×1×1 convolution
//!   kernels, estimated by the power method and differentiable in the
//!   kernel weights.
//! - [`training`] — DiceBCE loss, mixup, AdamW, and the three training
//!   stages (backbone, self-distillation, FiLM-transfer fine-tuning).
//! - [`eval`] — confusion counting, CSI/F1/IoU reports, and the
//!   per-(region, year) threshold sweep.
//!
//! Everything is a pure function of its inputs and seeds: same seed, same
//! bits, single-threaded throughout.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod model;
pub mod orthoreg;
pub mod rng;
pub mod training;

pub use error::CoreError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;
