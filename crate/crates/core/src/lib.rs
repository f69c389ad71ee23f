//! Uncertainty quantification for small convolutional classifiers: a
//! reverse-mode autodiff core, deterministic and variational Bayesian
//! networks, uncertainty metrics and maps, a synthetic multi-generator
//! benchmark and the experiment harness built on them.

pub mod bayes;
pub mod bench;
pub mod error;
pub mod harness;
pub mod maps;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
