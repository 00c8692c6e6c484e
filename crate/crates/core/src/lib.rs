//! Continual representation learning lab.
//!
//! Sequentially pretrains an MLP feature extractor over a stream of
//! class-split tasks (naive SGD, LP-FT, SI, DER and their LP-FT compositions),
//! then measures what the final extractor still knows about every task with
//! three few-shot probes: kNN, linear, and LP-FT.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod models;
pub mod probes;
pub mod rng;
pub mod scalar;
pub mod trainers;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Model = models::Model<f64>;
pub type FeatureExtractor = models::FeatureExtractor<f64>;
pub type Head = models::Head<f64>;
pub type Checkpoint = models::Checkpoint<f64>;
