//! Inductive spatio-temporal graph forecasting for air-quality station networks.
//!
//! Stations are identified by what can be observed about them (coordinates,
//! static terrain/climate attributes, neighborhood pollution statistics)
//! rather than by a per-index embedding table, so a trained model forecasts
//! for stations it never saw. Messages travel over a fixed sparse hybrid
//! graph (geographic plus semantic neighbors) whose edge weights are
//! recomputed from the input window, pruned by a learned soft rank threshold,
//! diffused with restart, and combined with signed per-step coefficients.

pub mod app;
pub mod bench;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geo;
pub mod model;
pub mod oracle;
pub mod propagation;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
