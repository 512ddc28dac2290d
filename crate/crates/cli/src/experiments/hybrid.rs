//! Online updates versus full offline retraining on held-out ratings.
//!
//! Protocol: train θ offline on a base split, measure held-out RMSE, apply
//! further ratings per user through the online learner and measure again,
//! then retrain offline on base plus further ratings and measure a third
//! time. Gains are relative RMSE reductions from the baseline.

use std::collections::{BTreeMap, HashSet};

use modelserve_core::model::{FactorTable, FeatureParams, ModelSchema, ModelVersion, Observation, Rating, WeightVector};
use modelserve_core::trainer::{als_retrain, build_version, replay_online, AlsConfig, TrainedModel};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::Serialize;

use super::mean;
use crate::{BenchError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// First `base` ratings per user train θ, the next `extra` arrive online,
    /// the rest are held out.
    PerUser,
    /// Half the ratings train θ; 70% of the remainder arrive online and the
    /// other 30% are held out.
    HalfSeventy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    /// Each user's ratings in timestamp order.
    Chronological,
    /// Each user's ratings in a seeded random order.
    Shuffled,
}

#[derive(Clone, Debug)]
pub struct HybridConfig {
    pub d: usize,
    pub lambda: f64,
    pub base: usize,
    pub extra: usize,
    pub protocol: Protocol,
    pub order: Order,
    pub als: AlsConfig,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            d: 10,
            lambda: 0.1,
            base: 10,
            extra: 7,
            protocol: Protocol::PerUser,
            order: Order::Chronological,
            als: AlsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HybridReport {
    pub seed: u64,
    pub protocol: Protocol,
    pub users: usize,
    /// Users with too few ratings for the split.
    pub excluded_users: usize,
    pub base_ratings: usize,
    pub extra_ratings: usize,
    /// Further ratings the online learner could not use (item absent from θ).
    pub extra_skipped: usize,
    pub test_ratings: usize,
    /// Held-out ratings dropped because θ has no factors for their item.
    pub test_skipped: usize,
    pub als_iterations: usize,
    pub baseline_rmse: f64,
    pub online_rmse: f64,
    pub offline_rmse: f64,
    pub online_gain: f64,
    pub offline_gain: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct HybridSummary {
    pub seeds: usize,
    pub mean_online_gain: f64,
    pub mean_offline_gain: f64,
    /// Ratio of the mean gains.
    pub ratio: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub base: Vec<Observation>,
    pub extra: Vec<Observation>,
    pub test: Vec<Observation>,
    pub excluded_users: usize,
}

pub fn split(ratings: &[Observation], cfg: &HybridConfig, seed: u64) -> Split {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Split::default();
    match cfg.protocol {
        Protocol::PerUser => {
            let mut by_user: BTreeMap<u64, Vec<&Observation>> = BTreeMap::new();
            for r in ratings {
                by_user.entry(r.uid).or_default().push(r);
            }
            for list in by_user.values_mut() {
                if list.len() <= cfg.base + cfg.extra {
                    out.excluded_users += 1;
                    continue;
                }
                match cfg.order {
                    // Stable, so equal timestamps keep file order.
                    Order::Chronological => list.sort_by_key(|r| r.timestamp_ms),
                    Order::Shuffled => list.shuffle(&mut rng),
                }
                let (base, rest) = list.split_at(cfg.base);
                let (extra, test) = rest.split_at(cfg.extra);
                out.base.extend(base.iter().map(|r| (*r).clone()));
                out.extra.extend(extra.iter().map(|r| (*r).clone()));
                out.test.extend(test.iter().map(|r| (*r).clone()));
            }
        }
        Protocol::HalfSeventy => {
            let mut all: Vec<&Observation> = ratings.iter().collect();
            match cfg.order {
                Order::Chronological => all.sort_by_key(|r| r.timestamp_ms),
                Order::Shuffled => all.shuffle(&mut rng),
            }
            let half = all.len() / 2;
            let online = half + (all.len() - half) * 7 / 10;
            out.base = all[..half].iter().map(|r| (*r).clone()).collect();
            out.extra = all[half..online].iter().map(|r| (*r).clone()).collect();
            out.test = all[online..].iter().map(|r| (*r).clone()).collect();
        }
    }
    out
}

fn ratings_of(obs: &[Observation]) -> Vec<Rating> {
    obs.iter().filter_map(Observation::rating).collect()
}

/// Root mean squared error of `wᵤᵀxᵢ` over `test`.
pub fn rmse(weights: &BTreeMap<u64, WeightVector>, table: &FactorTable, test: &[(u64, u64, f64)]) -> f64 {
    let sq: Vec<f64> = test
        .iter()
        .map(|&(u, i, y)| {
            let w = weights[&u].as_slice();
            let x = table.get(i).expect("held-out items are filtered to θ");
            let p: f64 = w.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            (y - p) * (y - p)
        })
        .collect();
    mean(&sq).sqrt()
}

fn table(trained: &TrainedModel) -> &FactorTable {
    trained.params.factor_table().expect("ALS yields a factor table")
}

pub fn run_hybrid_eval(ratings: &[Observation], cfg: &HybridConfig, seed: u64) -> Result<HybridReport> {
    let s = split(ratings, cfg, seed);
    if s.base.is_empty() || s.test.is_empty() {
        return Err(BenchError::InvalidConfig("split leaves no base or held-out ratings".into()));
    }
    let schema = ModelSchema::new("hybrid", cfg.d, cfg.lambda, 0.0)?;
    let als = AlsConfig {
        seed,
        ..cfg.als.clone()
    };

    let trained = als_retrain(&ratings_of(&s.base), &schema, None, &als)?;
    let iterations = trained.report.as_ref().map_or(0, |r| r.iterations);
    let base_table = table(&trained).clone();
    let base_users: HashSet<u64> = trained.weights.keys().copied().collect();
    let test: Vec<(u64, u64, f64)> = s
        .test
        .iter()
        .filter_map(|o| Some((o.uid, o.item.id()?, o.label)))
        .filter(|(u, i, _)| base_users.contains(u) && base_table.contains(*i))
        .collect();
    let test_skipped = s.test.len() - test.len();
    if test.is_empty() {
        return Err(BenchError::InvalidConfig("no held-out rating has a trained user and item".into()));
    }

    let initial = ModelVersion::initial(schema.clone(), FeatureParams::Materialized(FactorTable::new(cfg.d)))?;
    let mut served = build_version(trained, &initial, &s.base, s.base.len() as u64)?.version;
    let baseline = rmse(&served.weights, &base_table, &test);

    let extra_skipped = replay_online(&mut served, &s.extra)?;
    let online = rmse(&served.weights, &base_table, &test);

    let mut all = s.base.clone();
    all.extend(s.extra.iter().cloned());
    let full = als_retrain(&ratings_of(&all), &schema, None, &als)?;
    let offline = rmse(&full.weights, table(&full), &test);

    let online_gain = (baseline - online) / baseline;
    let offline_gain = (baseline - offline) / baseline;
    Ok(HybridReport {
        seed,
        protocol: cfg.protocol,
        users: base_users.len(),
        excluded_users: s.excluded_users,
        base_ratings: s.base.len(),
        extra_ratings: s.extra.len(),
        extra_skipped,
        test_ratings: test.len(),
        test_skipped,
        als_iterations: iterations,
        baseline_rmse: baseline,
        online_rmse: online,
        offline_rmse: offline,
        online_gain,
        offline_gain,
        ratio: online_gain / offline_gain,
    })
}

pub fn summarize(reports: &[HybridReport]) -> HybridSummary {
    let on: Vec<f64> = reports.iter().map(|r| r.online_gain).collect();
    let off: Vec<f64> = reports.iter().map(|r| r.offline_gain).collect();
    HybridSummary {
        seeds: reports.len(),
        mean_online_gain: mean(&on),
        mean_offline_gain: mean(&off),
        ratio: mean(&on) / mean(&off),
    }
}

pub fn run_hybrid_seeds(ratings: &[Observation], cfg: &HybridConfig, seeds: &[u64]) -> Result<Vec<HybridReport>> {
    seeds.iter().map(|&s| run_hybrid_eval(ratings, cfg, s)).collect()
}
