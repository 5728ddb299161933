//! Cross-domain recommendation with a knowledge-graph bridge between two
//! item catalogs and a learned, noise-injecting compression of the merged
//! user representation.
//!
//! The crate is organized bottom-up: [`graph`] builds the normalized block
//! adjacency, [`encoder`] runs light graph convolution, [`compression`] and
//! [`transfer`] define the objective, [`model`] wires them together with
//! exact gradients, and [`training`] / [`evaluation`] drive it.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compression;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
pub use matrix::Matrix;
