//! Link-level massive-MIMO feedback lab.
//!
//! Synthetic multipath channels are decomposed per resource block with a
//! complex SVD; the right-singular matrix `V` and the singular values `S`
//! are compressed jointly by a dual-input attention autoencoder and
//! reconstructed at the base station.
// NaN must fail range checks, so `!(x <= y)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod channel;
pub mod checkpoint;
pub mod classify;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod emevnet;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod svd;
pub mod tensor;

pub use error::{Error, Result};
