//! Correcting infectious-disease case forecasts for reporting delay.
//!
//! Provisional surveillance counts are revised over time ("backfill"), so the
//! counts available at forecast time can badly under- or over-state the final
//! ("validation") case counts. This crate estimates lag-dependent inverse
//! reporting factors from historical or proxy data, applies
//! rescaling/offset/imputation/exclusion corrections to log-link forecasters,
//! and evaluates the resulting nowcasts and forecasts against validation data.
//!
//! The main pieces:
//!
//! - [`triangle`]: reporting-triangle data model, line-list rollup, and
//!   "as-of" snapshots for rolling-origin experiments
//! - [`factors`]: inverse reporting factor estimation (lag-based, model-based,
//!   local, proxy shrinkage, fixed profiles)
//! - [`glm`]: count regression with log link, offsets, and natural splines
//! - [`correct`]: rescaling, mean-model offsets, multiple imputation, exclusion
//! - [`forecast`]: log-scale Gaussian ARMA and negative-binomial seasonal
//!   forecasters producing predictive distributions
//! - [`combine`]: Rubin's rules across imputations, equal-weight ensembles
//! - [`evaluate`]: absolute error, weighted interval score, coverage, rankings
//! - [`simulate`]: synthetic validation counts, delayed reports, and proxies
//! - [`pipeline`]: rolling-origin experiment loops and sensitivity grids
//! - [`epidata`]: fetching reporting triangles from the public Delphi API

pub mod combine;
pub mod correct;
pub mod epidata;
pub mod error;
pub mod evaluate;
pub mod factors;
pub mod forecast;
pub mod glm;
pub mod io;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod simulate;
pub mod triangle;

pub use error::{Error, Result};
