pub mod attack;
pub mod checkpoint;
pub mod autodiff;
pub mod codec;
pub mod config;
pub mod data;
pub mod distortion;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
