pub mod camle;
pub mod datagen;
pub mod embeddings;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seed;
pub mod tensor;

pub use params::ParameterSet;
pub use tensor::{Tensor, TensorError};
