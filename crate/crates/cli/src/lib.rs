//! Ingestion, experiments and benchmarks for modelserve.

pub mod error;
pub mod experiments;
pub mod movielens;
pub mod output;

pub use error::{BenchError, Result};
