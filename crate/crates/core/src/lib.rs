//! Uncertainty-aware latent safety filtering for a Dubins car.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifact;
pub mod cli;
pub mod config;
pub mod conformal;
pub mod datagen;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod filter;
pub mod grid;
pub mod gridsolver;
pub mod nn;
pub mod pipeline;
pub mod safelearn;
pub mod serve;
pub mod uncertainty;

pub use error::{Error, Result};
