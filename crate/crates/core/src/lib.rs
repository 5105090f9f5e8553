//! Zero-shot composition of domain adapters: a small causal language model
//! with bottleneck adapters, scoring strategies that rank adapters for an
//! unseen domain, parameter averaging and output ensembling, a multi-seed
//! benchmark grid, and a meta-regression over its results.
//!
//! The numeric core is generic over [`scalar::Scalar`]; training runs in
//! `f32` and gradient checks in `f64`. The aliases below name the common
//! instantiations.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod composer;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod kernel;
pub mod metareg;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};

pub type Tensor32 = kernel::Tensor<f32>;
pub type Tensor64 = kernel::Tensor<f64>;
pub type ParamTree32 = kernel::ParamTree<f32>;
pub type ParamTree64 = kernel::ParamTree<f64>;
pub type BaseModel32 = model::BaseModel<f32>;
pub type BaseModel64 = model::BaseModel<f64>;
pub type AdapterModule32 = model::AdapterModule<f32>;
pub type AdapterModule64 = model::AdapterModule<f64>;
