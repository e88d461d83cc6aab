//! Inertial activity recognition on a frozen GPT-2-style backbone.
//!
//! Sensor windows are cut into short frames, lifted into the backbone's
//! embedding space by a convolutional frontend, contextualized by frozen
//! transformer blocks with low-rank adapters on the attention projections,
//! mean-pooled, and classified by a linear head. Everything runs on the
//! in-crate tensor tape; no external ML runtime is involved.

pub mod archive;
pub mod backbone;
pub mod checks;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod frontend;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod train;

pub use commands::run;
pub use error::{Error, Result};
