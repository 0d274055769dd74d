//! Learning low-rank polynomials `P(x) = p(V*ᵀx)` over Gaussian covariates.
//!
//! The pipeline has two phases. [`trimmed_pca`] recovers the hidden
//! `r`-dimensional subspace approximately from the thresholded second-moment
//! matrix of the data. [`geosgd`] then alternates coefficient realignment
//! with rank-one geodesic SGD steps on the Grassmannian until both the frame
//! and the link polynomial are accurate.

// `!(x <= limit)` is used on purpose so that NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod geosgd;
pub mod harness;
pub mod hermite;
pub mod model;
pub mod subspace;
pub mod trimmed_pca;

pub use error::{Error, Result};
