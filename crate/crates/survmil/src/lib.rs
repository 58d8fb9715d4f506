//! Survival prediction from bags of patch features.
//!
//! The pipeline scores patches and keeps the top fraction (quantile gating),
//! clusters the survivors by joint morphological/spatial similarity, refines
//! them with intra- and inter-cluster self-attention, pools the slide into a
//! single embedding, and fits an expert-gated mixture of log-logistic
//! distributions to censored survival times.

// `!(x > 0.0)` guards reject NaN along with the out-of-domain values;
// rewriting them as partial_cmp chains would lose that property.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dataio;
pub mod edmll;
pub mod error;
pub mod ggc;
pub mod hca;
pub mod metrics;
pub mod qgps;
pub mod quad;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
