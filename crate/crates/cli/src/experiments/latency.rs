//! In-process latency of topK scoring and online updates.

use std::time::Instant;

use modelserve_core::cache::CacheConfig;
use modelserve_core::learner::UserLearnerState;
use modelserve_core::model::{FactorTable, FeatureParams, Item, ModelSchema, ModelVersion, Observation, WeightVector};
use modelserve_core::serving::Model;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{mean, percentile, scratch_server};
use crate::{BenchError, Result};

#[derive(Clone, Debug)]
pub struct LatencyConfig {
    pub dims: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Items in the synthetic factor table.
    pub items: u64,
    pub users: u64,
    /// Distinct (user, itemset) requests cycled through at each point.
    pub pool: usize,
    pub trials: usize,
    pub k: usize,
    pub update_dims: Vec<usize>,
    pub update_trials: usize,
    pub seed: u64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            dims: vec![10, 50, 100],
            sizes: vec![10, 100, 1000, 10_000],
            items: 10_000,
            users: 64,
            pool: 8,
            trials: 200,
            k: 10,
            update_dims: vec![10, 20, 50, 100, 200],
            update_trials: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Topk,
    /// Learner update alone: rank-one inverse update plus weight solve.
    Update,
    /// A full `observe` call: log append, shard hand-off and update.
    Observe,
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyRow {
    pub op: Op,
    pub d: usize,
    pub n: usize,
    pub cached: bool,
    pub trials: usize,
    pub mean_us: f64,
    pub p99_us: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares fit of `ys` against `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 && n > 1.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LinearFit { slope, intercept, r2 }
}

fn gaussian(rng: &mut StdRng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A model with Gaussian factors for `items` items and weights for `users` users.
pub fn synthetic_version(name: &str, d: usize, items: u64, users: u64, alpha: f64, seed: u64) -> Result<ModelVersion> {
    let mut rng = StdRng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let table = FactorTable::from_rows(d, (0..items).map(|i| (i, gaussian(&mut rng, d, scale))))?;
    let mut v = ModelVersion::initial(ModelSchema::new(name, d, 0.1, alpha)?, FeatureParams::Materialized(table))?;
    for uid in 0..users {
        v.weights.insert(uid, WeightVector::new(gaussian(&mut rng, d, 1.0))?);
    }
    Ok(v)
}

fn stats(op: Op, d: usize, n: usize, cached: bool, samples: &[f64]) -> LatencyRow {
    LatencyRow {
        op,
        d,
        n,
        cached,
        trials: samples.len(),
        mean_us: mean(samples),
        p99_us: percentile(samples, 0.99),
    }
}

/// Time topK over itemsets of each size at one dimension.
///
/// Cached runs serve every request once before timing, so timed calls find
/// every prediction in the cache. Uncached runs disable caching entirely.
pub fn topk_latency(cfg: &LatencyConfig, d: usize, cached: bool) -> Result<Vec<LatencyRow>> {
    let max_n = cfg.sizes.iter().copied().max().unwrap_or(0);
    let (_dir, server) = scratch_server(|c| {
        c.cache = CacheConfig {
            enabled: cached,
            prediction_capacity: CacheConfig::default().prediction_capacity.max(cfg.pool * max_n),
            feature_capacity: CacheConfig::default().feature_capacity.max(cfg.items as usize),
        };
    })?;
    let model = server.create_model_from(synthetic_version("latency", d, cfg.items, cfg.users, 0.0, cfg.seed)?)?;
    let mut rng = StdRng::seed_from_u64(cfg.seed ^ d as u64);
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        let pool: Vec<(u64, Vec<Item>)> = (0..cfg.pool)
            .map(|_| {
                let uid = rng.random_range(0..cfg.users);
                let items = (0..n).map(|_| Item::Id(rng.random_range(0..cfg.items))).collect();
                (uid, items)
            })
            .collect();
        for (uid, items) in &pool {
            model.top_k(*uid, items, cfg.k)?;
        }
        let samples = time_topk(&model, &pool, cfg.trials, cfg.k)?;
        rows.push(stats(Op::Topk, d, n, cached, &samples));
    }
    Ok(rows)
}

fn time_topk(model: &Model, pool: &[(u64, Vec<Item>)], trials: usize, k: usize) -> Result<Vec<f64>> {
    let mut samples = Vec::with_capacity(trials);
    for t in 0..trials {
        let (uid, items) = &pool[t % pool.len()];
        let start = Instant::now();
        let top = model.top_k(*uid, items, k)?;
        samples.push(start.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(top);
    }
    Ok(samples)
}

/// Time the learner update alone: absorb one observation and re-solve.
pub fn update_latency(d: usize, trials: usize, seed: u64) -> Result<LatencyRow> {
    let mut rng = StdRng::seed_from_u64(seed ^ (d as u64) << 8);
    let scale = 1.0 / (d as f64).sqrt();
    let inputs: Vec<(Vec<f64>, f64)> = (0..trials)
        .map(|_| (gaussian(&mut rng, d, scale), rng.random_range(0.5..5.0)))
        .collect();
    let mut state = UserLearnerState::new(d, 0.1);
    let mut served = WeightVector::zeros(d);
    // Warm-up outside the timed region.
    for (f, y) in inputs.iter().take(trials / 10) {
        state.online_step(&mut served, f, *y)?;
    }
    let mut samples = Vec::with_capacity(trials);
    for (f, y) in &inputs {
        let start = Instant::now();
        let err = state.online_step(&mut served, f, *y)?;
        samples.push(start.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(err);
    }
    Ok(stats(Op::Update, d, 1, false, &samples))
}

/// Time complete `observe` calls against a served model.
pub fn observe_latency(d: usize, trials: usize, seed: u64) -> Result<LatencyRow> {
    let (_dir, server) = scratch_server(|_| {})?;
    let items = 1000;
    let model = server.create_model_from(synthetic_version("observe", d, items, 16, 0.0, seed)?)?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let obs = Observation::new(rng.random_range(0..16), rng.random_range(0..items), rng.random_range(0.5..5.0));
        let start = Instant::now();
        model.observe(obs)?;
        samples.push(start.elapsed().as_secs_f64() * 1e6);
    }
    Ok(stats(Op::Observe, d, 1, false, &samples))
}

pub fn run_latency_bench(cfg: &LatencyConfig) -> Result<Vec<LatencyRow>> {
    if cfg.pool == 0 || cfg.trials == 0 || cfg.k == 0 {
        return Err(BenchError::InvalidConfig("pool, trials and k must be positive".into()));
    }
    let mut rows = Vec::new();
    for &d in &cfg.dims {
        for cached in [false, true] {
            rows.extend(topk_latency(cfg, d, cached)?);
        }
    }
    for &d in &cfg.update_dims {
        rows.push(update_latency(d, cfg.update_trials, cfg.seed)?);
        rows.push(observe_latency(d, cfg.update_trials.min(1000), cfg.seed)?);
    }
    Ok(rows)
}
