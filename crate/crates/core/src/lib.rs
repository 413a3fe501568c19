pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, ConvOptions, Gradients, Graph, Padding, Reduction, Var};
pub use error::{Error, Result, TensorError};
pub use tensor::Tensor;
