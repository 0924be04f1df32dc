pub mod complexity;
pub mod data;
pub mod error;
pub mod inference;
pub mod keyval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
