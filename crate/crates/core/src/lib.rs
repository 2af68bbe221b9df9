//! Toolkit for synthesizing error-correction training pairs, reweighting
//! them toward a deployment domain, and building mixed training sets.

pub mod cluster;
pub mod config;
pub mod data;
pub mod demo;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod llm;
pub mod mix;
pub mod optim;
pub mod pipeline;
pub mod reweight;
pub mod scoring;
pub mod simbench;
pub mod typo;
pub mod util;

pub use error::{Error, Result};
