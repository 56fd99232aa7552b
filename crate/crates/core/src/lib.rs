//! Quantization-aware early-exit action models for embedded point-goal
//! navigation.
//!
//! A multi-exit transformer maps egocentric grid observations to discrete
//! actions. The backbone can be compressed to 4-bit NF4 with low-rank
//! adapters trained on top, and inference stops at the first intermediate
//! head whose predictive entropy falls below a calibrated threshold.

pub mod adapters;
pub mod cli;
pub mod config;
pub mod error;
pub mod model;
pub mod navsim;
pub mod numerics;
pub mod quantizer;
pub mod training;
pub mod weightfile;

pub use error::{Error, Result};
