//! Hierarchical time-series forecasting with network coherency
//! regularization.
//!
//! The central idea: penalize the final linear layer `(W, b)` of a forecaster
//! by `||W - A W||_F + ||b - A b||_2`, where `A` is the hierarchy's
//! aggregation matrix. Every output `y = W z + b` then satisfies
//! `||y - A y|| <= ||z|| ||W - A W||_F + ||b - A b||`, for any input.

// Argument checks use `!(x >= 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod harness;
pub mod hierarchy;
pub mod metrics;
pub mod losses;
pub mod models;
pub mod numerics;

pub use error::{Error, Result};
