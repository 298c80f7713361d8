//! Efficient convolutional vision transformer: tokenizer, partitioned
//! attention encoder, token merging, CIFAR data pipeline and training.

pub mod config;
pub mod cost;
pub mod data;
pub mod encoder;
pub mod error;
pub mod params;
pub mod pyramid;
pub mod tokenizer;
pub mod optim;
pub mod checkpoint;
pub mod train;
pub mod verify;

pub use config::{Activation, ModelConfig, TokenizerVariant};
pub use cost::{count_costs, CostReport};
pub use error::{Error, Result};
pub use pyramid::{build_model, Ecvit};
