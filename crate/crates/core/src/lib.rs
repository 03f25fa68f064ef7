//! Contrastive spatiotemporal preference model (CSPM) for click-through-rate
//! prediction.
//!
//! The crate is generic over the floating-point type through
//! [`tensor::Scalar`]; `f64` is used for gradient checks and `f32` is
//! available for faster training. Concrete aliases are exported below.

pub mod checkpoint;
pub mod config;
pub mod csrl;
pub mod data;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod stif;
pub mod stpe;
pub mod tensor;
pub mod trainer;

pub use config::ExperimentConfig;
pub use error::{Error, ErrorClass, Result};
pub use model::{AblationSwitches, Cspm, ModelSpec};
pub use tensor::{Graph, ParamStore, Scalar, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Cspm64 = Cspm<f64>;
pub type Cspm32 = Cspm<f32>;
