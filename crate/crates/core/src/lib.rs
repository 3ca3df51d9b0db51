//! Desk-scale laboratory for collapse dynamics in Siamese self-supervised
//! learning: hand-differentiated losses and networks, gradient decomposition
//! tools, synthetic data, a small trainer and an experiment CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod trainer;

pub use error::{Error, Result};
