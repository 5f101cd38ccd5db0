//! Nonparametric Bayesian sparse ICA (IBP-ICA) with a hybrid variational /
//! Metropolis-Hastings learner, video patch extraction and a stacked
//! convolutional feature pipeline.

pub(crate) mod binio;
pub mod conv;
pub mod error;
pub mod inference;
pub mod patches;
pub mod pipeline;
pub mod special;

pub use error::{Error, Result};
