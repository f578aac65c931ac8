//! Seasonal-trend diffusion for multivariate time-series generation.
//!
//! A denoising diffusion model whose network splits each noisy window into a
//! trend and a seasonal part with a learnable moving average, models the trend
//! with residual perceptrons under reversible instance normalization, models the
//! seasonal part with per-level attention over a learnable wavelet pyramid, lets
//! the two parts cross-attend, and reassembles the clean-window estimate.
//!
//! The crate also carries the evaluation suite (discriminative, predictive,
//! Context-FID and correlation scores) and figure data (PCA, t-SNE, density).

pub mod checkpoint;
pub mod config;
pub mod correction;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod lma;
pub mod metrics;
pub mod nn;
pub mod seasonal;
pub mod synthetic;
pub mod tensor;
pub mod trend;
pub mod viz;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
