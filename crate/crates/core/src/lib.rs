//! Certified unlearning for regularized multinomial logistic regression when the
//! original training data is unavailable and only a surrogate sample is at hand.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod distance;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod sampler;
pub mod seed;
pub mod unlearn;

pub use error::{Error, ErrorCategory, Result};
