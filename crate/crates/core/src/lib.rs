//! Weekly demand forecasting for e-retail catalogs.
//!
//! Two forecasting machines share one data pipeline:
//!
//! * [`armdn`]: an associative MLP feeding an LSTM whose hidden state
//!   parameterizes a Gaussian mixture over next-week (transformed) demand,
//!   trained by masked negative log-likelihood ([`train`]).
//! * [`cubist`]: M5-style model trees with recursive smoothing, boosted
//!   committees and nearest-neighbor correction, rolled forward one step at
//!   a time over lag features.
//!
//! [`dataset`] owns the series model, the synthetic generator and CSV I/O;
//! [`features`] turns raw weekly rows into model inputs; [`hierarchy`]
//! splits national forecasts across fulfillment regions; [`eval`] holds the
//! metrics, reports and the ablation harness.

pub mod armdn;
pub mod cubist;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod hierarchy;
pub mod train;
mod util;

pub use error::{Error, Result};
