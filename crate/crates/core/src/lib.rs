//! Retformer: a transformer for binary retinal-image classification together
//! with the tooling needed to train, tune, evaluate and explain it.
//!
//! The numeric core ([`numerics`], [`model`]) is generic over the scalar type
//! through [`Scalar`]; the aliases below pin the common concrete choices. The
//! experiment layers ([`train`], [`hpo`], [`explain`], [`run`]) work in `f64`.

pub mod data;
pub mod explain;
pub mod hpo;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod run;
pub mod scalar;
pub mod train;

pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type ModelParameters64 = model::ModelParameters<f64>;
pub type ModelParameters32 = model::ModelParameters<f32>;
