//! Stateful layers with hand-written forward/backward passes.

mod activation;
mod batchnorm;
mod loss;
mod pad;

pub use activation::{relu, relu_backward};
pub use batchnorm::{channel_moments, BatchNorm, BnMode, DEFAULT_EMA_DECAY, DEFAULT_EPSILON};
pub use loss::{softmax, softmax_cross_entropy, LossOutput};
pub use pad::{zero_pad_channels, zero_pad_channels_backward};
