//! Single-image super resolution for grayscale microscopy with combined
//! first/second-order (bilinear) channel-wise and spatial attention.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: n-d arrays with reverse-mode automatic differentiation
//! - [`nn`]: convolution, pooling, covariance and shuffle primitives
//! - [`model`]: the residual attention network and its parameter store
//! - [`optim`]: L1 loss, Adam, the training loop and checkpoints
//! - [`image`]: PGM I/O, bicubic resampling, patch extraction
//! - [`metrics`]: PSNR / SSIM / timing reports
//! - [`data`]: manifests, splits and the texture-rich/poor partition
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! concrete aliases at the crate root are what most callers want.

use std::fmt::{Debug, Display};

use num_traits::Float;

pub mod config;
pub mod data;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;

/// Floating-point element type for tensors and images: `f32` or `f64`.
pub trait Scalar: Float + Debug + Display + 'static {
    /// Checkpoint dtype tag.
    const DTYPE_TAG: u8;
    /// Size in bytes of one scalar on disk.
    const BYTE_WIDTH: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn as_f64(self) -> f64 {
        num_traits::NumCast::from(self).unwrap()
    }
    fn from_f64(v: f64) -> Self {
        num_traits::NumCast::from(v).unwrap()
    }
}

impl Scalar for f32 {
    const DTYPE_TAG: u8 = 0;
    const BYTE_WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE_TAG: u8 = 1;
    const BYTE_WIDTH: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type GrayImage32 = image::GrayImage<f32>;
pub type GrayImage64 = image::GrayImage<f64>;
pub type ParamStore32 = model::ParamStore<f32>;
pub type ParamStore64 = model::ParamStore<f64>;

pub use model::ModelConfig;
pub use optim::TrainConfig;
