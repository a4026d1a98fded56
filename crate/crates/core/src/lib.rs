//! Federated-learning simulator with adaptive layer-wise weight shrinking.
//!
//! The server aggregates client models by weighted averaging, then rescales
//! each layer by a closed-form shrinking factor computed from the global
//! parameter norm, the pseudo-gradient norm, and the variance of client
//! gradients. The crate bundles the pieces needed to study that aggregation
//! rule at desk scale: a small deterministic NN substrate, Dirichlet data
//! partitioning, the federated round loop, the shrinking math itself, and
//! experiment plumbing (configs, CSV/JSONL logging, checkpoints).

// Validation uses `!(x > 0.0)` so NaN configs fail closed; `x <= 0.0` would
// accept NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fl;
pub mod lws;
pub mod nn;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
