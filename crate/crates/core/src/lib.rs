//! Fourier-sensitivity analysis and Fourier-regularized training for small
//! image classifiers.
//!
//! The input-gradient of a model's loss, taken through a unitary 2D DFT, is
//! the gradient with respect to the Fourier coefficients of the input. Its
//! radially binned power spectrum measures which spatial frequencies the
//! model is sensitive to, and because every step is differentiable the same
//! quantity can be penalised during training.

pub mod autodiff;
pub mod corruptions;
pub mod data;
pub mod error;
pub mod fourier_reg;
pub mod nn;
pub mod sensitivity;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Crate version, recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
