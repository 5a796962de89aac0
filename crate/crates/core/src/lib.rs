//! Multi-channel residual CNN denoising of Rician-corrupted 3D MR volumes.
//!
//! Every differentiable kernel (convolution, batch normalization, ReLU) and
//! its gradient is implemented here and checked against finite differences.

pub mod datapipe;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod noise;
pub mod optim;
pub mod phantom;
pub mod selfcheck;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use network::{build_model, Model, ModelConfig};
pub use tensor::{Mode, Tensor};
pub use volume::Volume;
