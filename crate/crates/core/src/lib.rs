//! Weakly supervised video anomaly detection from frame embeddings:
//! prompt-aligned pseudo-labels, an adaptive-span temporal encoder and a
//! frame classifier trained jointly.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod plg;
pub mod prompt;
pub mod seed;
pub mod tcsal;
pub mod train;

pub use error::{Error, Result};
