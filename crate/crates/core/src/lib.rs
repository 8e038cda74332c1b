//! A desk-scale laboratory for hydra attention.
//!
//! The crate implements the standard softmax, linear, and hydra attention
//! variants over a minimal dense tensor type, verifies the algebraic
//! equivalences connecting them, models ViT-B/16 FLOP counts analytically,
//! trains a small vision transformer with layer-replacement schedules, and
//! renders token-contribution heatmaps. Everything runs on the CPU in a few
//! seconds to minutes; the point is checkable math, not throughput.
//!
//! Modules map onto the subsystems:
//!
//! - [`tensor`]: row-major dense arrays (tokens are rows, features columns)
//! - [`autodiff`]: tape-based reverse mode plus a finite-difference oracle
//! - [`kernels`]: the kernel feature maps applied to Q and K
//! - [`attention`]: msa / mla / hydra / aft-simple / polynl and their adjoints
//! - [`flops`]: the analytic multiply-accumulate model of ViT-B/16
//! - [`toymodel`]: a trainable toy ViT with replacement schedules
//! - [`bench`]: wall-clock and MAC-count scaling harness
//! - [`viz`]: token-contribution scores and PGM heatmaps
//! - [`checks`]: the runtime invariant suite behind `hydra check`

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checks;
pub mod flops;
pub mod kernels;
pub mod netpbm;
pub mod rng;
pub mod tensor;
pub mod toymodel;
pub mod viz;

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration or layer specification violates a precondition
    /// (e.g. head count not dividing the feature dimension).
    #[error("spec error: {0}")]
    Spec(String),
    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Measured or provided data is unusable (empty sweep, nonpositive time).
    #[error("data error: {0}")]
    Data(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },
    /// A file being read does not match its expected format.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Relative error with an absolute floor: |a - b| / max(|a|, |b|, 1e-8).
///
/// The floor keeps the metric meaningful when both values are near zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
}
