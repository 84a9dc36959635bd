//! Deterministic simulator for federated edge learning.
//!
//! The crate covers a server-side L-BFGS optimizer whose curvature pairs are
//! smoothed by client-estimated empirical Fisher diagonals, the one-vs-all
//! federated scheme (FedOVA), FedAvg baselines, IID and label-skewed client
//! partitions, and an exact ledger of transmitted scalars.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod federation;
pub mod fedova;
pub mod harness;
pub mod lbfgs;
pub mod ledger;
pub mod models;
pub mod numerics;

pub use error::{Error, Result};
