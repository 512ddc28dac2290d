//! Feature-cache hit rate under Zipfian item popularity.
//!
//! Every request is a point prediction for a user the model has never seen,
//! so the prediction cache never helps and each request looks up item
//! features through the feature cache.

use modelserve_core::cache::CacheConfig;
use modelserve_core::model::Item;
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Zipf};
use serde::Serialize;

use super::latency::synthetic_version;
use super::scratch_server;
use crate::{BenchError, Result};

#[derive(Clone, Debug)]
pub struct ZipfConfig {
    pub items: u64,
    pub requests: usize,
    pub exponent: f64,
    /// Feature-cache capacity as a fraction of `items`.
    pub capacity_fraction: f64,
    pub d: usize,
    pub seed: u64,
}

impl Default for ZipfConfig {
    fn default() -> Self {
        ZipfConfig {
            items: 10_000,
            requests: 100_000,
            exponent: 1.0,
            capacity_fraction: 0.1,
            d: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ZipfRow {
    pub items: u64,
    pub capacity: usize,
    pub exponent: f64,
    pub requests: usize,
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
}

pub fn run_zipf(cfg: &ZipfConfig) -> Result<ZipfRow> {
    let capacity = (cfg.items as f64 * cfg.capacity_fraction).round() as usize;
    if cfg.items == 0 || capacity == 0 {
        return Err(BenchError::InvalidConfig("items and cache capacity must be positive".into()));
    }
    let zipf = Zipf::new(cfg.items as f64, cfg.exponent)
        .map_err(|e| BenchError::InvalidConfig(format!("zipf: {e}")))?;
    let (_dir, server) = scratch_server(|c| {
        c.cache = CacheConfig {
            enabled: true,
            prediction_capacity: 1,
            feature_capacity: capacity,
        };
    })?;
    let model = server.create_model_from(synthetic_version("zipf", cfg.d, cfg.items, 0, 0.0, cfg.seed)?)?;
    server.caches().features.reset_stats();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    for uid in 0..cfg.requests as u64 {
        // Ranks are 1-based; rank 1 is item 0.
        let item = zipf.sample(&mut rng) as u64 - 1;
        model.predict(uid, Item::Id(item))?;
    }
    let stats = server.caches().features.stats();
    Ok(ZipfRow {
        items: cfg.items,
        capacity,
        exponent: cfg.exponent,
        requests: cfg.requests,
        hits: stats.hits,
        misses: stats.misses,
        hit_rate: stats.hit_rate(),
    })
}
