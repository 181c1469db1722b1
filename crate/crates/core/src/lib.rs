//! Brain tumor segmentation with a deformable, multi-scale attention U-Net.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sspp;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_model, A4Unet, Ablation, ModelConfig, ModelOutput, ModelSummary};

pub use candle_core as candle;
