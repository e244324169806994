//! Fixed-order PCA for overestimated factor models.
//!
//! The library estimates factors, loadings, and the low-rank signal of a
//! panel `X = B F' + U` using a user-chosen working dimension `R >= r`,
//! provides spectral diagnostics for the overestimated eigencomponents, a
//! deformed Marchenko-Pastur law solver, a factor-augmented IV/OLS
//! treatment-effect estimator with HC0 inference, and a reproducible
//! Monte Carlo harness.
//!
//! Replication-level parallelism uses rayon and is enabled by the default
//! `parallel` feature; without it the same code paths run sequentially and
//! produce byte-identical numeric results.

pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod montecarlo;
pub mod mp;
pub mod panel;
pub mod pca;
pub mod rng;
pub mod rotation;
pub mod stats;
pub mod svd;

pub use error::{FopcaError, Result};
pub use panel::{demean_columns, FactorStructure, Panel};
pub use pca::{fit, PcaFit};
pub use svd::{svd_top, SvdTriple};
