//! Spatially filtered unconditional quantile regression.
//!
//! The response's recentered influence function at each requested quantile
//! is regressed on covariates plus a Moran-eigenvector random effect whose
//! variance parameters are estimated by restricted maximum likelihood.
//! Coefficient uncertainty comes from a semiparametric bootstrap that
//! resamples the density at the quantile and reuses cached cross-products,
//! so per-replicate cost does not grow with the sample size.
//!
//! Module map:
//!
//! * [`geometry`]: connectivity kernels, MST range rule, k-means anchors.
//! * [`eigen`]: exact and Nyström Moran bases, Moran coefficient tests.
//! * [`rif`]: sample quantiles, kernel densities, RIF vectors.
//! * [`estimator`]: REML fits of the low-rank spatial mixed model.
//! * [`bootstrap`]: parallel, deterministic semiparametric bootstrap.
//! * [`model`]: end-to-end analyses across a quantile grid.
//! * [`simdata`]: synthetic data from the random-effects generating process.

pub mod bootstrap;
pub mod eigen;
pub mod error;
pub mod estimator;
pub mod geometry;
mod linalg;
pub mod model;
mod optim;
pub mod rif;
pub mod simdata;

pub use error::{Error, Result};
pub use linalg::correlation;
