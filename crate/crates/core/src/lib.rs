//! Adversarial attacks on differentiable no-reference image-quality metrics.
//!
//! The crate contains a small reverse-mode autodiff substrate, three
//! stand-in quality metrics, a U-Net perturbation generator trained to
//! inflate a metric in a single forward pass, the iterative and universal
//! baseline attacks, and a benchmark harness reporting metric gain and
//! per-image latency.

pub mod adam;
pub mod attacks;
pub mod autodiff;
pub mod bench;
pub mod conv;
pub mod data;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod report;
pub mod tensor;
pub mod tensor_file;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
