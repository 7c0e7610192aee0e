//! Scalar-generic tensors, reverse-mode autodiff and Adam, sized for small
//! convolutional GANs on a CPU.

pub mod adam;
pub mod conv;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{BoundParams, Initializer, ParamSet};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
