//! Core numerics for ship segmentation training: a small reverse-mode tensor
//! engine, the U-Net model, Focal Dice loss, segmentation metrics, synthetic
//! chip generation, SGD with a cyclic schedule, and timing/cost telemetry.

pub mod autograd;
pub mod chipgen;
pub mod codec;
pub mod cost;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod telemetry;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
