//! Exploration benefit on a synthetic linear bandit.
//!
//! One user with hidden weights w* repeatedly asks for topK(k = 1) over a
//! fixed item set and reports `w*ᵀf + noise` for the item served. Regret
//! accumulates `max_i w*ᵀfᵢ − w*ᵀf_chosen`.

use modelserve_core::learner::UserLearnerState;
use modelserve_core::model::{FactorTable, FeatureParams, Item, ModelSchema, ModelVersion, Observation};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{mean, scratch_server};
use crate::{BenchError, Result};

/// The user's learner state before the first request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// No prior observations.
    Fresh,
    /// Prior observations rate the truly best item as the worst one.
    Pessimistic,
    /// A prior that already ranks items exactly as w* does.
    Oracle,
}

#[derive(Clone, Debug)]
pub struct BanditConfig {
    pub d: usize,
    pub items: u64,
    pub horizon: usize,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub noise: f64,
    pub lambda: f64,
    pub init: Init,
    /// Emit one curve point every this many steps.
    pub curve_every: usize,
}

impl Default for BanditConfig {
    fn default() -> Self {
        BanditConfig {
            d: 5,
            items: 20,
            horizon: 2000,
            alphas: vec![0.0, 0.1, 0.5, 1.0],
            seeds: (0..20).collect(),
            noise: 0.1,
            lambda: 1.0,
            init: Init::Fresh,
            curve_every: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RegretRow {
    pub alpha: f64,
    pub step: usize,
    /// Cumulative regret averaged over seeds.
    pub mean_cumulative_regret: f64,
}

#[derive(Clone, Debug)]
pub struct BanditRun {
    pub alpha: f64,
    pub seed: u64,
    /// Cumulative regret after each step.
    pub cumulative: Vec<f64>,
    /// Steps whose served item differed from the best-mean item.
    pub exploratory_steps: usize,
}

impl BanditRun {
    pub fn final_regret(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

struct Problem {
    truth: Vec<f64>,
    features: Vec<Vec<f64>>,
}

impl Problem {
    fn new(cfg: &BanditConfig, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let scale = 1.0 / (cfg.d as f64).sqrt();
        let truth = (0..cfg.d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let features = (0..cfg.items)
            .map(|_| (0..cfg.d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Problem { truth, features }
    }

    fn score(&self, item: usize) -> f64 {
        self.truth.iter().zip(&self.features[item]).map(|(a, b)| a * b).sum()
    }

    fn best(&self) -> (usize, f64) {
        (0..self.features.len())
            .map(|i| (i, self.score(i)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one item")
    }

    fn worst_score(&self) -> f64 {
        (0..self.features.len()).map(|i| self.score(i)).fold(f64::INFINITY, f64::min)
    }
}

fn prior(cfg: &BanditConfig, p: &Problem) -> Result<UserLearnerState> {
    let d = cfg.d;
    Ok(match cfg.init {
        Init::Fresh => UserLearnerState::new(d, cfg.lambda),
        Init::Pessimistic => {
            let (best, _) = p.best();
            let mut s = UserLearnerState::new(d, cfg.lambda);
            for _ in 0..20 {
                s.absorb(&p.features[best], p.worst_score())?;
            }
            s
        }
        Init::Oracle => {
            // A = (λ + c)I and b = c·w*, so A⁻¹b is a positive multiple of w*.
            let c = 1e6;
            let mut a_inv = vec![0.0; d * d];
            for k in 0..d {
                a_inv[k * d + k] = 1.0 / (cfg.lambda + c);
            }
            let b = p.truth.iter().map(|w| c * w).collect();
            UserLearnerState::from_parts(d, cfg.lambda, a_inv, b, 0)?
        }
    })
}

pub fn run_bandit(cfg: &BanditConfig, alpha: f64, seed: u64) -> Result<BanditRun> {
    if cfg.items == 0 || cfg.d == 0 {
        return Err(BenchError::InvalidConfig("need at least one item and dimension".into()));
    }
    let p = Problem::new(cfg, seed);
    let table = FactorTable::from_rows(cfg.d, p.features.iter().enumerate().map(|(i, f)| (i as u64, f.clone())))?;
    let mut v = ModelVersion::initial(ModelSchema::new("bandit", cfg.d, cfg.lambda, alpha)?, FeatureParams::Materialized(table))?;
    let state = prior(cfg, &p)?;
    v.weights.insert(0, state.solve_weights());
    v.learners.insert(0, state);

    let (_dir, server) = scratch_server(|_| {})?;
    let model = server.create_model_from(v)?;
    let items: Vec<Item> = (0..cfg.items).map(Item::Id).collect();
    let (_, best) = p.best();
    let mut noise_rng = StdRng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut regret = 0.0;
    let mut cumulative = Vec::with_capacity(cfg.horizon);
    let mut exploratory_steps = 0;
    for _ in 0..cfg.horizon {
        let top = model.top_k(0, &items, 1)?;
        let chosen = top.results[0].item.id().expect("ids only") as usize;
        let score = p.score(chosen);
        regret += best - score;
        cumulative.push(regret);
        exploratory_steps += top.exploratory as usize;
        let y = score + cfg.noise * noise_rng.sample::<f64, _>(StandardNormal);
        let mut obs = Observation::new(0, chosen as u64, y);
        obs.exploratory = top.exploratory;
        model.observe(obs)?;
    }
    Ok(BanditRun {
        alpha,
        seed,
        cumulative,
        exploratory_steps,
    })
}

pub fn run_bandit_bench(cfg: &BanditConfig) -> Result<Vec<BanditRun>> {
    let mut runs = Vec::new();
    for &alpha in &cfg.alphas {
        for &seed in &cfg.seeds {
            runs.push(run_bandit(cfg, alpha, seed)?);
        }
    }
    Ok(runs)
}

/// Mean final cumulative regret per α, in the order of `cfg.alphas`.
pub fn mean_final_regret(cfg: &BanditConfig, runs: &[BanditRun]) -> Vec<(f64, f64)> {
    cfg.alphas
        .iter()
        .map(|&a| {
            let finals: Vec<f64> = runs.iter().filter(|r| r.alpha == a).map(BanditRun::final_regret).collect();
            (a, mean(&finals))
        })
        .collect()
}

/// Regret curves averaged over seeds, sampled every `cfg.curve_every` steps.
pub fn regret_curves(cfg: &BanditConfig, runs: &[BanditRun]) -> Vec<RegretRow> {
    let every = cfg.curve_every.max(1);
    let mut rows = Vec::new();
    for &alpha in &cfg.alphas {
        let of_alpha: Vec<&BanditRun> = runs.iter().filter(|r| r.alpha == alpha).collect();
        let mut step = every;
        while step <= cfg.horizon {
            let at: Vec<f64> = of_alpha.iter().map(|r| r.cumulative[step - 1]).collect();
            rows.push(RegretRow {
                alpha,
                step,
                mean_cumulative_regret: mean(&at),
            });
            if step == cfg.horizon {
                break;
            }
            step = (step + every).min(cfg.horizon);
        }
    }
    rows
}
