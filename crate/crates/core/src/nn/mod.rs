//! Convolutional building blocks and resamplers.

pub(crate) mod conv;
mod filter;
mod layers;
mod resample;

pub use layers::{conv2d, conv_transpose2d, residual_block, Conv2dLayer, ConvT2dLayer, Module, ResidualBlock};
pub(crate) use layers::join;
pub use resample::{downsample2x, resize_bilinear, upsample2x};
