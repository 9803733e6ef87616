//! Evolutionary surrogate-assisted prescription of epidemic interventions.
//!
//! The crate is organised as the pipeline runs: [`data`] ingestion and sample
//! construction, the factored recurrent [`predictor`], autoregressive
//! [`forecast`]ing, residual Gaussian-process [`rio`] calibration, NSGA-II
//! [`evolution`] of prescriptor networks, predictor [`metrics`], the artifact
//! [`store`] and the request logic behind the HTTP [`service`].

pub mod data;
pub mod error;
pub mod evolution;
pub mod forecast;
pub mod metrics;
pub mod npi;

pub use error::{Error, Result};
pub use npi::{NpiVector, MAX_STRINGENCY, NPI_COUNT, NPI_MAX_LEVELS};
pub mod predictor;
pub mod rio;
pub mod service;
pub mod store;
