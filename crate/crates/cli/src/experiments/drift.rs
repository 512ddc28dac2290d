//! Drift detection and automatic retraining.
//!
//! Labels come from a hidden low-rank matrix `y = uᵀv + noise`. After a
//! warm-up and a converged retrain, the stream runs stationary, then every
//! label is negated. The run records how many drifted observations pass
//! before an acknowledgement reports `Stale`, waits for the automatic
//! retrain to be swapped in, and compares the mean squared error of drifted
//! observations before and after the swap.

use std::time::{Duration, Instant};

use modelserve_core::lifecycle::{Staleness, StalenessConfig};
use modelserve_core::model::{FactorTable, FeatureParams, ModelSchema, ModelVersion, Observation};
use modelserve_core::serving::Model;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{mean, scratch_server};
use crate::{BenchError, Result};

#[derive(Clone, Debug)]
pub struct DriftConfig {
    pub users: u64,
    pub items: u64,
    /// Rank of the hidden label matrix and of the served model.
    pub d: usize,
    pub lambda: f64,
    /// Standard deviation of the noiseless labels.
    pub signal: f64,
    pub noise: f64,
    /// Observations per user before the first retrain.
    pub warmup_per_user: usize,
    /// Stationary observations before labels flip.
    pub stationary: usize,
    /// Give up on detection after this many drifted observations.
    pub max_drifted: usize,
    /// Drifted observations served by the retrained version.
    pub post: usize,
    pub staleness: StalenessConfig,
    pub seed: u64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            users: 50,
            items: 100,
            d: 3,
            lambda: 0.1,
            signal: 2.0,
            noise: 0.1,
            warmup_per_user: 60,
            stationary: 500,
            max_drifted: 5000,
            post: 500,
            staleness: StalenessConfig {
                auto_retrain: true,
                ..StalenessConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DriftReport {
    pub seed: u64,
    pub min_window: usize,
    pub window: usize,
    pub threshold_slope: f64,
    /// Drifted observations up to and including the first `Stale` ack.
    pub observations_until_stale: Option<usize>,
    pub version_before: u64,
    pub version_after: u64,
    /// Mean squared error of drifted observations served before the swap.
    pub pre_retrain_error: f64,
    /// Mean squared error of drifted observations served after the swap.
    pub post_retrain_error: f64,
    /// The same post-swap stream served by a model that never retrained.
    pub post_without_retrain_error: f64,
    /// Share of the retrain's training log that was drifted.
    pub drifted_share_at_trigger: f64,
    /// Stale acks, each followed by a retrain attempt, during the post phase.
    pub stale_after_swap: usize,
    pub stationary_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ControlReport {
    pub seed: u64,
    pub observations: usize,
    pub stale_acks: usize,
    pub retrains: u64,
    pub mean_error: f64,
}

struct Truth {
    users: Vec<Vec<f64>>,
    items: Vec<Vec<f64>>,
    noise: f64,
}

impl Truth {
    fn new(cfg: &DriftConfig, rng: &mut StdRng) -> Self {
        let scale = 1.0 / (cfg.d as f64).sqrt();
        let mut draw = |n: u64, s: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..cfg.d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect()
        };
        let users = draw(cfg.users, cfg.signal);
        let items = draw(cfg.items, scale);
        Truth {
            users,
            items,
            noise: cfg.noise,
        }
    }

    fn observation(&self, rng: &mut StdRng, sign: f64) -> Observation {
        let uid = rng.random_range(0..self.users.len() as u64);
        let item = rng.random_range(0..self.items.len() as u64);
        let mean: f64 = self.users[uid as usize]
            .iter()
            .zip(&self.items[item as usize])
            .map(|(a, b)| a * b)
            .sum();
        let y = sign * mean + self.noise * rng.sample::<f64, _>(StandardNormal);
        Observation::new(uid, item, y)
    }
}

struct Setup {
    _dir: tempfile::TempDir,
    _server: modelserve_core::serving::Server,
    model: std::sync::Arc<Model>,
    truth: Truth,
    rng: StdRng,
}

/// A served model trained on a warm-up stream, with auto-retrain configured
/// by `cfg.staleness`.
fn setup(cfg: &DriftConfig) -> Result<Setup> {
    if cfg.users == 0 || cfg.items == 0 || cfg.d == 0 {
        return Err(BenchError::InvalidConfig("users, items and d must be positive".into()));
    }
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let truth = Truth::new(cfg, &mut rng);
    let scale = 1.0 / (cfg.d as f64).sqrt();
    let table = FactorTable::from_rows(
        cfg.d,
        (0..cfg.items).map(|i| (i, (0..cfg.d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())),
    )?;
    let version = ModelVersion::initial(ModelSchema::new("drift", cfg.d, cfg.lambda, 0.0)?, FeatureParams::Materialized(table))?;
    let (dir, server) = scratch_server(|c| {
        c.staleness = StalenessConfig {
            auto_retrain: false,
            ..cfg.staleness.clone()
        };
        c.als.seed = cfg.seed;
    })?;
    let model = server.create_model_from(version)?;
    for _ in 0..cfg.warmup_per_user as u64 * cfg.users {
        model.observe(truth.observation(&mut rng, 1.0))?;
    }
    model.trigger_retrain("warm-up")?.wait()?;
    drop(model);
    // Reopen with the configured staleness policy.
    let mut config = server.config().clone();
    drop(server);
    config.staleness = cfg.staleness.clone();
    let server = modelserve_core::serving::Server::open(config)?;
    let model = server.model("drift")?;
    Ok(Setup {
        _dir: dir,
        _server: server,
        model,
        truth,
        rng,
    })
}

/// Block until no retrain is in flight.
fn settle(model: &Model) -> Result<()> {
    let deadline = Instant::now() + Duration::from_secs(300);
    while model.status().retrain_in_flight.is_some() {
        if Instant::now() > deadline {
            return Err(BenchError::InvalidConfig("retrain did not finish".into()));
        }
        std::thread::sleep(Duration::from_millis(1));
    }
    Ok(())
}

struct Stream {
    stationary: Vec<f64>,
    pre: Vec<f64>,
    stale_at: Option<usize>,
    post: Vec<f64>,
    version_before: u64,
    version_after: u64,
    log_at_trigger: u64,
    retrains_after: usize,
}

/// Drive one drift run. With `stop_after` set, exactly that many drifted
/// observations precede the post phase regardless of staleness.
fn drive(cfg: &DriftConfig, staleness: StalenessConfig, stop_after: Option<usize>) -> Result<Stream> {
    let mut s = setup(&DriftConfig {
        staleness,
        ..cfg.clone()
    })?;
    let (model, truth, rng) = (s.model.clone(), &s.truth, &mut s.rng);
    let version_before = model.version();
    let stationary = (0..cfg.stationary)
        .map(|_| Ok(model.observe(truth.observation(rng, 1.0))?.error))
        .collect::<Result<Vec<f64>>>()?;
    let mut pre = Vec::new();
    let mut stale_at = None;
    let mut log_at_trigger = 0;
    for n in 1..=stop_after.unwrap_or(cfg.max_drifted) {
        let ack = model.observe(truth.observation(rng, -1.0))?;
        pre.push(ack.error);
        if stop_after.is_none() && ack.staleness == Staleness::Stale {
            stale_at = Some(n);
            log_at_trigger = ack.seq;
            break;
        }
    }
    settle(&model)?;
    let version_after = model.version();
    let mut post = Vec::with_capacity(cfg.post);
    let mut retrains_after = 0;
    if stop_after.is_some() || version_after != version_before {
        for _ in 0..cfg.post {
            let ack = model.observe(truth.observation(rng, -1.0))?;
            post.push(ack.error);
            if ack.staleness == Staleness::Stale {
                settle(&model)?;
                retrains_after += 1;
            }
        }
    }
    Ok(Stream {
        stationary,
        pre,
        stale_at,
        post,
        version_before,
        version_after,
        log_at_trigger,
        retrains_after,
    })
}

/// Detect injected drift, retrain, and compare errors on the drifted stream
/// before and after the swap. A second run feeds the identical stream to a
/// model with retraining disabled.
pub fn run_drift(cfg: &DriftConfig) -> Result<DriftReport> {
    let live = drive(cfg, cfg.staleness.clone(), None)?;
    let post_without_retrain_error = match live.stale_at {
        Some(n) if !live.post.is_empty() => {
            let frozen = StalenessConfig {
                auto_retrain: false,
                ..cfg.staleness.clone()
            };
            mean(&drive(cfg, frozen, Some(n))?.post)
        }
        _ => f64::NAN,
    };
    let nan_if_empty = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { mean(xs) };
    Ok(DriftReport {
        seed: cfg.seed,
        min_window: cfg.staleness.min_window,
        window: cfg.staleness.window,
        threshold_slope: cfg.staleness.threshold_slope,
        observations_until_stale: live.stale_at,
        version_before: live.version_before,
        version_after: live.version_after,
        pre_retrain_error: nan_if_empty(&live.pre),
        post_retrain_error: nan_if_empty(&live.post),
        post_without_retrain_error,
        drifted_share_at_trigger: match live.stale_at {
            Some(n) => n as f64 / live.log_at_trigger as f64,
            None => f64::NAN,
        },
        stale_after_swap: live.retrains_after,
        stationary_error: mean(&live.stationary),
    })
}

/// Stationary stream of `10 · min_window` observations with nothing injected.
pub fn run_control(cfg: &DriftConfig) -> Result<ControlReport> {
    let mut s = setup(cfg)?;
    let (model, truth, rng) = (s.model.clone(), &s.truth, &mut s.rng);
    let before = model.version();
    let observations = 10 * cfg.staleness.min_window;
    let mut stale_acks = 0;
    let mut errors = Vec::with_capacity(observations);
    for _ in 0..observations {
        let ack = model.observe(truth.observation(rng, 1.0))?;
        stale_acks += (ack.staleness == Staleness::Stale) as usize;
        errors.push(ack.error);
    }
    settle(&model)?;
    Ok(ControlReport {
        seed: cfg.seed,
        observations,
        stale_acks,
        retrains: model.version() - before,
        mean_error: mean(&errors),
    })
}
