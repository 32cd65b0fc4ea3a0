//! Dense n-dimensional arrays with define-by-run reverse-mode
//! differentiation, sized for small 3D convolutional networks on one core.

pub mod conv;
mod error;
#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;
mod graph;
pub mod norm;
mod param;
mod real;
mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{conv_out_shape, Graph, Var};
pub use param::{Adam, AdamConfig, Param, ParamStore, ReduceOnPlateau};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
