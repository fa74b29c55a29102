pub mod analysis;
pub mod checkpoint;
pub mod chemix;
pub mod datasets;
pub mod descriptors;
pub mod error;
pub mod featurize;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod pom;
pub mod scalar;
pub mod snitz;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Reduce, Var};
pub use params::{Adam, Param, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision forms used for training runs.
pub type Tensor32 = Tensor<f32>;
pub type Graph32 = Graph<f32>;
pub type ParamStore32 = ParamStore<f32>;
/// Double-precision forms used for gradient checks.
pub type Tensor64 = Tensor<f64>;
pub type Graph64 = Graph<f64>;
pub type ParamStore64 = ParamStore<f64>;
