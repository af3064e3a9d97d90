//! GraphSTAD: semi-supervised spatio-temporal anomaly detection for
//! calorimeter-style digi-occupancy map streams.
//!
//! The pipeline synthesizes occupancy maps, renormalizes them against run
//! settings, trains a CNN+GNN+LSTM+VAE reconstruction autoencoder on healthy
//! maps, and flags dead/hot/degraded channels from standardized
//! reconstruction-error scores.

pub mod anomaly;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geometry;
pub mod model;
pub mod renorm;
pub mod simlab;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
