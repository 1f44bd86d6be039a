//! Desk-scale laboratory for attention entropy collapse.
//!
//! Trains toy Transformers in `f64`, tracks per-layer attention entropy,
//! certifies entropy against its spectral lower bound, and implements
//! spectrally reparameterized linear layers (`Ŵ = γ/σ(W) · W`) driven by one
//! power-iteration step per training update.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod reparam;
pub mod rng;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Matrix;
