#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use modelserve_core::cache::CacheConfig;
use modelserve_core::model::{FactorTable, FeatureParams, Item, ModelSchema, ModelVersion, Observation, WeightVector};
use modelserve_core::serving::{Model, Server, ServerConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut StdRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A version with Gaussian item factors for ids `0..items` and weights for
/// uids `0..users`.
pub fn random_version(name: &str, d: usize, items: u64, users: u64, alpha: f64, seed: u64) -> ModelVersion {
    let mut rng = StdRng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let table = FactorTable::from_rows(d, (0..items).map(|i| (i, gaussian(&mut rng, d, scale)))).unwrap();
    let schema = ModelSchema::new(name, d, 0.1, alpha).unwrap();
    let mut v = ModelVersion::initial(schema, FeatureParams::Materialized(table)).unwrap();
    for uid in 0..users {
        v.weights.insert(uid, WeightVector::new(gaussian(&mut rng, d, 1.0)).unwrap());
    }
    v
}

pub fn random_observation(rng: &mut StdRng, users: u64, items: u64) -> Observation {
    let mut obs = Observation::new(rng.random_range(0..users), rng.random_range(0..items), rng.random_range(0.5..5.0));
    obs.timestamp_ms = 1;
    obs
}

pub fn random_items(rng: &mut StdRng, n: usize, items: u64) -> Vec<Item> {
    (0..n).map(|_| Item::Id(rng.random_range(0..items))).collect()
}

pub fn config(dir: &Path, cache: bool) -> ServerConfig {
    let mut c = ServerConfig::new(dir);
    c.cache = CacheConfig {
        enabled: cache,
        ..CacheConfig::default()
    };
    c
}

pub fn serve(dir: &Path, cache: bool, version: ModelVersion) -> (Server, Arc<Model>) {
    let server = Server::new(config(dir, cache)).unwrap();
    let model = server.create_model_from(version).unwrap();
    (server, model)
}
