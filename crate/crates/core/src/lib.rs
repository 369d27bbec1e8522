pub mod error;
pub mod evaluation;
pub mod data;
pub mod dynamics;
pub mod model;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
