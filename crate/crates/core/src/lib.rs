pub mod codec;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod registry;
pub mod task;
pub mod text;
pub mod unet;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
