//! Numerical laboratory for mixed even p-spin glasses.
//!
//! Modules are layered bottom-up: [`core_model`] holds the mixture and
//! disorder, [`ensembles`] builds tree-correlated families on top of it,
//! [`parisi`] evaluates the variational functionals, [`optimizers`] and
//! [`ogp_lab`] run algorithms against sampled instances, and
//! [`ultrametric`] handles dated trees and their embeddings.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod core_model;
pub mod ensembles;
pub mod error;
pub mod ogp_lab;
pub mod optimizers;
pub mod parisi;
pub mod quad;
pub mod rng;
pub mod selftest;
pub mod ultrametric;

pub use error::{Error, Result};
