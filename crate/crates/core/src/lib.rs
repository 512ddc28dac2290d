//! Low-latency model serving with per-user online updates and offline retraining.

pub mod cache;
pub mod cluster;
pub mod config;
pub mod error;
pub mod http;
pub mod learner;
pub mod lifecycle;
pub mod model;
pub mod serving;
pub mod trainer;

pub use error::{Error, Result};
