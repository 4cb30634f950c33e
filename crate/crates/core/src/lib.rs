//! Imputation of missing cross-sectional stock predictors and the downstream
//! machinery for judging it: an EM estimator for the multivariate normal with
//! arbitrary missingness, ad-hoc and factor-model imputers, spectral diagnostics, a
//! random-correlation simulation lab and rolling principal-components-regression
//! backtests.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod em;
pub mod error;
pub mod imputers;
pub mod linalg;
pub mod month;
pub mod panel;
pub mod simlab;
pub mod spectral;
pub mod transform;

pub use error::{Error, ErrorClass, Result};
pub use month::YearMonth;
