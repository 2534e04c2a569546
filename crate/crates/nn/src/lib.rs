//! Segmentation and meta models, losses, checkpoints and training.

pub mod checkpoint;
pub mod error;
pub mod evaluate;
pub mod im2col;
pub mod layers;
pub mod losses;
pub mod metanet;
pub mod params;
pub mod pipeline;
pub mod scheduler;
pub mod segnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
