//! Short-term bike-sharing demand forecasting with irregular convolution.
//!
//! The pipeline runs from raw trip records to hourly demand grids
//! ([`grid`]), discovers semantic neighbors of every cell by Pearson
//! correlation or dynamic time warping ([`similarity`]), and trains a
//! three-branch irregular-convolution + LSTM network ([`model`]) on top of a
//! small reverse-mode differentiation engine ([`diff`]).
//!
//! The spatial-neighbor CNN+LSTM and LSTM-only baselines reuse the same
//! machinery: a CNN is an irregular convolution whose index happens to be
//! the 3x3 Moore neighborhood.

pub mod config;
pub mod diff;
pub mod error;
pub mod exec;
pub mod grid;
pub mod irconv;
pub mod lstm;
pub mod model;
pub mod pipeline;
pub mod similarity;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Execution;
