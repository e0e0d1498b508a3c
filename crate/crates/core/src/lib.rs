//! Simulation of tumour-growth treatment data under informative sampling, and
//! neural-CDE forecasters trained with inverse-intensity-weighted losses.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`.

// `!(x > y)` also rejects NaN, which is the point of most such checks here.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cdeflow;
pub mod config;
pub mod datastore;
pub mod error;
pub mod evalx;
pub mod gradcore;
pub mod objectives;
pub mod sampler;
pub mod scalar;
pub mod simkit;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = gradcore::Tensor<f64>;
pub type Tape64 = gradcore::Tape<f64>;
pub type ParamStore64 = gradcore::ParamStore<f64>;
pub type CdeModel64 = cdeflow::CdeModel<f64>;
pub type TrainedModel64 = trainer::TrainedModel<f64>;
