pub mod cli;
pub mod container;
pub mod datapipe;
pub mod error;
pub mod flow;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
