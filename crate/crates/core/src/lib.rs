//! Interpretable multi-station pollutant forecasting.
//!
//! Forecasts decompose into a station-local attention term over
//! time-feature tokens and a cross-station transport term whose weights
//! are conditioned on forecast wind, station bearings and distances. Both
//! terms expose their normalized weights as attributions.
#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated float comparisons reject NaN

pub mod attribution;
pub mod config;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod model;
pub mod pipeline;
pub mod simulator;
#[cfg(test)]
pub(crate) mod testutil;
pub mod training;

pub use dataio::{FeatureSpec, Frame, Normalizer, WindowConfig, WindowSample};
pub use error::{Error, Result};
pub use geometry::{StationNetwork, WindSummary};
pub use model::{ForecastBundle, ForwardPass, Model, ModelParams, ModelSpec};
pub use config::RunConfig;
pub use training::checkpoint::Checkpoint;
pub use training::TrainConfig;
