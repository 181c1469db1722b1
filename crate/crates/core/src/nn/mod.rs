//! Building blocks shared by the encoder, bottleneck and decoder.

pub mod deform;
pub mod layers;
pub mod params;

pub use deform::{deform_conv2d, grouped_conv2d, SamplingConvConfig};
pub use layers::{
    gelu, log_softmax, resize_bilinear, sigmoid, softmax, upsample2x, Conv2d, ConvSpec, GroupNorm,
    LayerNorm, Linear, ResidualBlock,
};
pub use params::{Init, ParamBuilder, ParamStore};
