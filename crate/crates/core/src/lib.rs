//! Future instance prediction on bird's-eye-view grids.

pub mod autograd;
pub mod config;
pub mod container;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod predictor;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use tensor::Tensor;
