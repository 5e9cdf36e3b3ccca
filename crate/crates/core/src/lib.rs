//! Counterfactual explanations for binary classifiers with a variational
//! autoencoder trained against a frozen predictor, plus baselines and the
//! evaluation protocol used to compare them.

mod error;

pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod datasets;
pub mod eval;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod stats;

pub use error::{Error, Result};
