pub mod binarize;
mod binio;
pub mod data;
pub mod deploy;
pub mod error;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Network, NetworkConfig};
pub use tensor::{Real, Rng, Tensor4};
