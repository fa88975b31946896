//! Genotype-by-environment prediction toolkit.
//!
//! The pipeline decomposes multi-environment trial yields with a
//! factor-analytic linear mixed model ([`mixed`]), trains a two-tower
//! network on the resulting genotype, environment and interaction labels
//! ([`neural`]), compares against kernel baselines ([`kernels`]) and scores
//! predictions by ranking quality and simulated selection ([`evaluation`]).
//! [`simgen`] produces synthetic trials with known ground truth.

pub mod data;
pub mod evaluation;
mod linalg;
mod error;
pub mod kernels;
pub mod mixed;
pub mod neural;
pub mod seeds;
pub mod simgen;

pub use error::{Error, Result};
