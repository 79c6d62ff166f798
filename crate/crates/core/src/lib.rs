//! Data-driven synthesis of rational state-feedback controllers with
//! sum-of-squares Lyapunov certificates.
//!
//! The pipeline: collect snapshot data under constant inputs
//! ([`koopman::collect`]), fit a lifted bilinear surrogate
//! ([`koopman::edmd_fit`]), bound its residual, assemble and solve the
//! robust matrix-SOS program ([`design::build_design`],
//! [`design::synthesize`]), then estimate a region of attraction and
//! validate the certificate.

// `!(x >= tol)` is used deliberately so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod design;
pub mod error;
pub mod koopman;
pub mod poly;
pub mod region;
pub mod sdp;
pub mod sim;
pub mod sosc;

pub use error::{Error, Result};
