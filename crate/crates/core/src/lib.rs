//! Adaptive testing of high-dimensional quantile regression coefficients.
//!
//! Given a response `Y`, low-dimensional adjustment covariates `Z` (with an
//! intercept) and high-dimensional covariates `X`, the crate tests
//! `H0: beta_tau = 0` at a quantile level `tau` with a sum-type U-statistic,
//! a max-type statistic calibrated by a Gumbel limit, and their Cauchy
//! combination. The [`sim`] module reproduces size and power studies and the
//! [`io`] module drives CSV datasets and the subsample protocol.

pub mod error;
pub mod io;
pub mod numlin;
pub mod qreg;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use numlin::{DistributionKind, Matrix};
pub use qreg::{fit_nuisance, QuantileFit, Vector};
pub use stats::{run_full_test, CombinationRule, Dataset, TestResult, TraceMode};

