//! Offline retraining: alternating ridge least squares for the factorization
//! objective, assembly of the next [`ModelVersion`], and the cache prewarm
//! plan computed against it.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{check_dim, Error, Result};
use crate::learner::{bootstrap_weights, UserLearnerState};
use crate::model::{
    dot, featurize, CompensatedSum, FactorTable, FeatureFunction, FeatureParams, Item, ModelSchema,
    ModelVersion, Observation, Rating, WeightVector,
};

#[derive(Clone, Debug, PartialEq)]
pub struct AlsConfig {
    pub max_iterations: usize,
    /// Stop once `(prev - cur) / prev` falls below this.
    pub tolerance: f64,
    pub seed: u64,
    /// Factors start uniform in `(-init_scale, init_scale)`; zero means all-zero.
    pub init_scale: f64,
}

impl Default for AlsConfig {
    fn default() -> Self {
        AlsConfig {
            max_iterations: 15,
            tolerance: 1e-4,
            seed: 0,
            init_scale: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlsReport {
    /// Objective at initialization followed by one value per iteration.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub train_rmse: f64,
}

/// Output of an offline retrain: new θ and user weights.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: FeatureParams,
    pub weights: BTreeMap<u64, WeightVector>,
    pub report: Option<AlsReport>,
}

/// Dense factor block for one side of the factorization.
struct Factors {
    ids: Vec<u64>,
    values: Vec<f64>,
    dim: usize,
}

impl Factors {
    fn row(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.dim..(idx + 1) * self.dim]
    }

    fn init(ids: Vec<u64>, dim: usize, rng: &mut StdRng, scale: f64, warm: impl Fn(u64) -> Option<Vec<f64>>) -> Self {
        let mut values = Vec::with_capacity(ids.len() * dim);
        for &id in &ids {
            // Always draw, so warm rows do not shift the stream for cold ones.
            let cold: Vec<f64> = (0..dim)
                .map(|_| if scale > 0.0 { rng.random_range(-scale..scale) } else { 0.0 })
                .collect();
            match warm(id) {
                Some(w) if w.len() == dim => values.extend(w),
                _ => values.extend(cold),
            }
        }
        Factors { ids, values, dim }
    }
}

/// Solve every row of `target` as a ridge regression against `other`.
fn half_step(target: &mut Factors, other: &Factors, groups: &[Vec<(usize, f64)>], lambda: f64) {
    let d = target.dim;
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for (idx, group) in groups.iter().enumerate() {
        gram.fill(0.0);
        rhs.fill(0.0);
        for k in 0..d {
            gram[(k, k)] = lambda;
        }
        for &(j, r) in group {
            let x = other.row(j);
            for a in 0..d {
                let xa = x[a];
                rhs[a] += r * xa;
                for b in a..d {
                    gram[(a, b)] += xa * x[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let chol = gram
            .clone()
            .cholesky()
            .expect("λ > 0 keeps the normal equations positive definite");
        let sol = chol.solve(&rhs);
        target.values[idx * d..(idx + 1) * d].copy_from_slice(sol.as_slice());
    }
}

fn objective(users: &Factors, items: &Factors, by_user: &[Vec<(usize, f64)>], lambda: f64) -> (f64, f64) {
    let mut penalty = CompensatedSum::default();
    for v in users.values.chunks_exact(users.dim).chain(items.values.chunks_exact(items.dim)) {
        penalty.add(dot(v, v));
    }
    let mut loss = CompensatedSum::default();
    let mut n = 0usize;
    for (u, group) in by_user.iter().enumerate() {
        let w = users.row(u);
        for &(i, r) in group {
            let e = r - dot(w, items.row(i));
            loss.add(e * e);
            n += 1;
        }
    }
    let rmse = (loss.value() / n.max(1) as f64).sqrt();
    (lambda * penalty.value() + loss.value(), rmse)
}

/// Alternating ridge least squares on explicit ratings.
///
/// Each iteration solves every user given the items, then every item given
/// the users; both half-steps are exact minimizers, so the objective never
/// increases. Deterministic for a given `(ratings, schema, config)`.
pub fn als_retrain(
    ratings: &[Rating],
    schema: &ModelSchema,
    warm_start: Option<&ModelVersion>,
    config: &AlsConfig,
) -> Result<TrainedModel> {
    if ratings.is_empty() {
        return Err(Error::EmptyLog);
    }
    schema.validate()?;
    let d = schema.dimension;
    for r in ratings {
        if !r.value.is_finite() {
            return Err(Error::NonFinite("rating"));
        }
    }

    let mut user_ids: Vec<u64> = ratings.iter().map(|r| r.uid).collect();
    user_ids.sort_unstable();
    user_ids.dedup();
    let mut item_ids: Vec<u64> = ratings.iter().map(|r| r.item).collect();
    item_ids.sort_unstable();
    item_ids.dedup();
    let user_idx: HashMap<u64, usize> = user_ids.iter().enumerate().map(|(i, u)| (*u, i)).collect();
    let item_idx: HashMap<u64, usize> = item_ids.iter().enumerate().map(|(i, u)| (*u, i)).collect();

    let mut by_user = vec![Vec::new(); user_ids.len()];
    let mut by_item = vec![Vec::new(); item_ids.len()];
    for r in ratings {
        let (u, i) = (user_idx[&r.uid], item_idx[&r.item]);
        by_user[u].push((i, r.value));
        by_item[i].push((u, r.value));
    }

    let warm_table = warm_start.and_then(|v| v.params.factor_table()).filter(|t| t.dim() == d);
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut users = Factors::init(user_ids, d, &mut rng, config.init_scale, |u| {
        warm_start.and_then(|v| v.weights.get(&u)).map(|w| w.as_slice().to_vec())
    });
    let mut items = Factors::init(item_ids, d, &mut rng, config.init_scale, |i| {
        warm_table.and_then(|t| t.get(i)).map(|x| x.to_vec())
    });

    let lambda = schema.lambda;
    let (initial, mut rmse) = objective(&users, &items, &by_user, lambda);
    let mut history = vec![initial];
    let mut iterations = 0;
    for _ in 0..config.max_iterations {
        half_step(&mut users, &items, &by_user, lambda);
        half_step(&mut items, &users, &by_item, lambda);
        iterations += 1;
        let prev = *history.last().unwrap();
        let (cur, r) = objective(&users, &items, &by_user, lambda);
        history.push(cur);
        rmse = r;
        if prev <= 0.0 || (prev - cur) / prev < config.tolerance {
            break;
        }
    }
    log::debug!(
        "als: {} users, {} items, {iterations} iterations, objective {:.4} -> {:.4}, rmse {rmse:.4}",
        users.ids.len(),
        items.ids.len(),
        history[0],
        history.last().unwrap()
    );

    let table = FactorTable::from_rows(d, items.ids.iter().enumerate().map(|(i, id)| (*id, items.row(i).to_vec())))?;
    let weights = users
        .ids
        .iter()
        .enumerate()
        .map(|(u, id)| Ok((*id, WeightVector::new(users.row(u).to_vec())?)))
        .collect::<Result<_>>()?;
    Ok(TrainedModel {
        params: FeatureParams::Materialized(table),
        weights,
        report: Some(AlsReport {
            objective_history: history,
            iterations,
            train_rmse: rmse,
        }),
    })
}

/// Retrain entry point for any feature family. Materialized models run ALS
/// over the log's ratings; computed models keep θ and refit users only.
pub fn retrain(
    log: &[Observation],
    schema: &ModelSchema,
    previous: &ModelVersion,
    warm_start: bool,
    config: &AlsConfig,
) -> Result<TrainedModel> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    match previous.params.as_ref() {
        FeatureParams::Materialized(_) => {
            let ratings: Vec<Rating> = log.iter().filter_map(Observation::rating).collect();
            als_retrain(&ratings, schema, warm_start.then_some(previous), config)
        }
        FeatureParams::Computed(_) => Ok(TrainedModel {
            params: previous.params.as_ref().clone(),
            weights: BTreeMap::new(),
            report: None,
        }),
    }
}

/// Result of [`build_version`]: the version plus observations that could not
/// be replayed because their item is absent from the new θ.
#[derive(Debug)]
pub struct BuiltVersion {
    pub version: ModelVersion,
    pub skipped_observations: usize,
}

/// Fold observations into learner states under `params`, in order.
pub(crate) fn replay_into(
    learners: &mut BTreeMap<u64, UserLearnerState>,
    params: &FeatureParams,
    schema: &ModelSchema,
    log: &[Observation],
) -> Result<usize> {
    let mut skipped = 0;
    for obs in log {
        let f = match featurize(params, &obs.item) {
            Ok(f) => f,
            Err(Error::UnknownItem(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        learners
            .entry(obs.uid)
            .or_insert_with(|| UserLearnerState::new(schema.dimension, schema.lambda))
            .absorb(&f, obs.label)?;
    }
    Ok(skipped)
}

/// Apply observations through the online path (absorb, then serve the new
/// ridge solution), exactly as live serving does. Returns how many were
/// skipped for unknown items.
pub fn replay_online(version: &mut ModelVersion, log: &[Observation]) -> Result<usize> {
    let d = version.schema.dimension;
    let lambda = version.schema.lambda;
    let mut skipped = 0;
    for obs in log {
        let f = match featurize(&version.params, &obs.item) {
            Ok(f) => f,
            Err(Error::UnknownItem(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let learner = version
            .learners
            .entry(obs.uid)
            .or_insert_with(|| UserLearnerState::new(d, lambda));
        let served = version
            .weights
            .entry(obs.uid)
            .or_insert_with(|| WeightVector::zeros(d));
        learner.online_step(served, &f, obs.label)?;
    }
    Ok(skipped)
}

/// Assemble the next version from trained output. Learner states are rebuilt
/// by replaying each user's log slice under the new θ, so online updates
/// continue from the full history after the swap.
pub fn build_version(trained: TrainedModel, old: &ModelVersion, log: &[Observation], log_seq: u64) -> Result<BuiltVersion> {
    let schema = old.schema.clone();
    let d = schema.dimension;
    check_dim(d, trained.params.dim())?;
    for w in trained.weights.values() {
        check_dim(d, w.dim())?;
    }

    let mut learners = BTreeMap::new();
    let skipped = replay_into(&mut learners, &trained.params, &schema, log)?;

    let fallback = bootstrap_weights(trained.weights.values(), d)?;
    let mut weights = BTreeMap::new();
    for (uid, state) in &learners {
        let w = trained.weights.get(uid).cloned().unwrap_or_else(|| state.solve_weights());
        weights.insert(*uid, w);
    }
    for uid in old.weights.keys().chain(trained.weights.keys()) {
        if !weights.contains_key(uid) {
            learners.insert(*uid, UserLearnerState::new(d, schema.lambda));
            let w = trained.weights.get(uid).cloned().unwrap_or_else(|| fallback.clone());
            weights.insert(*uid, w);
        }
    }

    let version = ModelVersion {
        schema,
        params: Arc::new(trained.params),
        weights,
        learners,
        version: old.version + 1,
        log_seq,
    };
    version.validate()?;
    Ok(BuiltVersion {
        version,
        skipped_observations: skipped,
    })
}

#[derive(Debug, Default)]
pub struct PrewarmPlan {
    pub features: Vec<(Item, Arc<[f64]>)>,
    pub predictions: Vec<(u64, Item, f64)>,
    /// Keys whose item no longer exists in the new θ.
    pub dropped_items: usize,
    /// Prediction keys whose user has no weights in the new version.
    pub dropped_users: usize,
}

/// Re-evaluate every previously cached feature and prediction key under `new`.
pub fn prewarm_plan(feature_items: &[Item], prediction_keys: &[(u64, Item)], new: &ModelVersion) -> Result<PrewarmPlan> {
    let mut plan = PrewarmPlan::default();
    let mut evaluated: HashMap<Item, Option<Arc<[f64]>>> = HashMap::new();
    let mut lookup = |item: &Item| -> Result<Option<Arc<[f64]>>> {
        if let Some(hit) = evaluated.get(item) {
            return Ok(hit.clone());
        }
        let f = match featurize(&new.params, item) {
            Ok(f) => Some(f),
            Err(Error::UnknownItem(_)) => None,
            Err(e) => return Err(e),
        };
        evaluated.insert(item.clone(), f.clone());
        Ok(f)
    };
    for item in feature_items {
        match lookup(item)? {
            Some(f) => plan.features.push((item.clone(), f)),
            None => plan.dropped_items += 1,
        }
    }
    for (uid, item) in prediction_keys {
        let Some(w) = new.weights.get(uid) else {
            plan.dropped_users += 1;
            continue;
        };
        match lookup(item)? {
            Some(f) => plan.predictions.push((*uid, item.clone(), dot(w.as_slice(), &f))),
            None => plan.dropped_items += 1,
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::mf_objective;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn schema(d: usize, lambda: f64) -> ModelSchema {
        ModelSchema::new("t", d, lambda, 0.0).unwrap()
    }

    fn random_ratings(seed: u64, users: u64, items: u64, n: usize) -> Vec<Rating> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n)
            .map(|_| Rating {
                uid: rng.random_range(0..users),
                item: rng.random_range(100..100 + items),
                value: rng.random_range(1..=5) as f64,
            })
            .collect()
    }

    /// Minimize `λ(w² + x²) + (r − wx)²` by coarse grid search followed by
    /// Newton iterations on the 2-D gradient.
    fn scalar_oracle(r: f64, lambda: f64) -> f64 {
        let f = |w: f64, x: f64| lambda * (w * w + x * x) + (r - w * x).powi(2);
        let (mut w, mut x) = (0.0, 0.0);
        let mut best = f64::INFINITY;
        for a in 0..=400 {
            for b in 0..=400 {
                let (wa, xb) = (-4.0 + a as f64 * 0.02, -4.0 + b as f64 * 0.02);
                if f(wa, xb) < best {
                    best = f(wa, xb);
                    (w, x) = (wa, xb);
                }
            }
        }
        for _ in 0..50 {
            let e = r - w * x;
            let (gw, gx) = (2.0 * lambda * w - 2.0 * x * e, 2.0 * lambda * x - 2.0 * w * e);
            let hww = 2.0 * lambda + 2.0 * x * x;
            let hxx = 2.0 * lambda + 2.0 * w * w;
            let hwx = 4.0 * w * x - 2.0 * r;
            let det = hww * hxx - hwx * hwx;
            w -= (hxx * gw - hwx * gx) / det;
            x -= (hww * gx - hwx * gw) / det;
        }
        w * x
    }

    #[test]
    fn single_rating_converges_to_scalar_optimum() {
        let ratings = [Rating { uid: 1, item: 1, value: 4.0 }];
        let config = AlsConfig { max_iterations: 500, tolerance: 0.0, seed: 3, ..AlsConfig::default() };
        let trained = als_retrain(&ratings, &schema(1, 0.1), None, &config).unwrap();
        let w = trained.weights[&1].as_slice()[0];
        let x = trained.params.factor_table().unwrap().get(1).unwrap()[0];
        let expected = scalar_oracle(4.0, 0.1);
        assert!((expected - 3.9).abs() < 1e-9, "oracle {expected}");
        assert!((w * x - expected).abs() < 1e-3, "{} vs {expected}", w * x);
    }

    #[test]
    fn zero_ratings_stay_at_zero_fixed_point() {
        let ratings: Vec<Rating> = (0..20)
            .map(|k| Rating { uid: k % 4, item: k % 5, value: 0.0 })
            .collect();
        let config = AlsConfig { init_scale: 0.0, ..AlsConfig::default() };
        let trained = als_retrain(&ratings, &schema(3, 0.1), None, &config).unwrap();
        assert!(trained.weights.values().all(|w| w.as_slice().iter().all(|v| *v == 0.0)));
        let table = trained.params.factor_table().unwrap();
        assert!(table.sorted_rows().iter().all(|(_, x)| x.iter().all(|v| *v == 0.0)));
        let obj = mf_objective(&trained.weights, table, &ratings, 0.1).unwrap();
        assert_eq!(obj, 0.0);
    }

    #[test]
    fn objective_never_increases_and_matches_public_objective() {
        let ratings = random_ratings(5, 40, 30, 600);
        let config = AlsConfig { max_iterations: 25, tolerance: 0.0, ..AlsConfig::default() };
        let trained = als_retrain(&ratings, &schema(4, 0.1), None, &config).unwrap();
        let report = trained.report.as_ref().unwrap();
        assert_eq!(report.objective_history.len(), 26);
        for pair in report.objective_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{pair:?}");
        }
        let table = trained.params.factor_table().unwrap();
        let direct = mf_objective(&trained.weights, table, &ratings, 0.1).unwrap();
        let last = *report.objective_history.last().unwrap();
        assert!((direct - last).abs() <= 1e-9 * last.max(1.0));
    }

    #[test]
    fn retraining_is_deterministic() {
        let ratings = random_ratings(9, 20, 15, 200);
        let config = AlsConfig { seed: 77, ..AlsConfig::default() };
        let a = als_retrain(&ratings, &schema(3, 0.5), None, &config).unwrap();
        let b = als_retrain(&ratings, &schema(3, 0.5), None, &config).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.params, b.params);
        let c = als_retrain(&ratings, &schema(3, 0.5), None, &AlsConfig { seed: 78, ..config }).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn empty_log_is_rejected() {
        assert!(matches!(
            als_retrain(&[], &schema(2, 0.1), None, &AlsConfig::default()),
            Err(Error::EmptyLog)
        ));
    }

    fn observations(ratings: &[Rating]) -> Vec<Observation> {
        ratings.iter().map(|r| Observation::new(r.uid, r.item, r.value)).collect()
    }

    #[test]
    fn build_version_rebuilds_learners_from_log() {
        let ratings = random_ratings(13, 10, 8, 120);
        let log = observations(&ratings);
        let s = schema(3, 0.1);
        let mut old = ModelVersion::initial(s.clone(), FeatureParams::Materialized(FactorTable::new(3))).unwrap();
        old.version = 3;
        // a user known to the old version but absent from the log
        old.weights.insert(999, WeightVector::new(vec![1.0, 1.0, 1.0]).unwrap());

        let trained = retrain(&log, &s, &old, false, &AlsConfig::default()).unwrap();
        let trained_weights = trained.weights.clone();
        let built = build_version(trained, &old, &log, 120).unwrap();
        let v = built.version;
        assert_eq!(v.version, 4);
        assert_eq!(v.log_seq, 120);
        assert_eq!(built.skipped_observations, 0);

        // replaying a user's slice through absorb reproduces its state exactly
        let uid = ratings[0].uid;
        let mut expected = UserLearnerState::new(3, 0.1);
        for r in ratings.iter().filter(|r| r.uid == uid) {
            let f = v.params.features(&Item::Id(r.item)).unwrap();
            expected.absorb(&f, r.value).unwrap();
        }
        assert_eq!(v.learners[&uid], expected);
        assert_eq!(v.weights[&uid], trained_weights[&uid]);

        // cold user: fresh state, bootstrap weights
        assert_eq!(v.learners[&999], UserLearnerState::new(3, 0.1));
        let mean = bootstrap_weights(trained_weights.values(), 3).unwrap();
        assert_eq!(v.weights[&999], mean);
    }

    #[test]
    fn prewarm_plan_matches_on_demand_values() {
        let ratings = random_ratings(17, 12, 10, 150);
        let log = observations(&ratings);
        let s = schema(2, 0.1);
        let old = ModelVersion::initial(s.clone(), FeatureParams::Materialized(FactorTable::new(2))).unwrap();
        let trained = retrain(&log, &s, &old, false, &AlsConfig::default()).unwrap();
        let v = build_version(trained, &old, &log, 150).unwrap().version;

        let empty = prewarm_plan(&[], &[], &v).unwrap();
        assert!(empty.features.is_empty() && empty.predictions.is_empty());

        let mut rng = StdRng::seed_from_u64(1);
        let mut keys = Vec::new();
        for _ in 0..100 {
            keys.push((rng.random_range(0..12u64), Item::Id(rng.random_range(100..110u64))));
        }
        keys.push((3, Item::Id(5000)));
        keys.push((4242, Item::Id(100)));
        let items = vec![Item::Id(100), Item::Id(5000)];
        let plan = prewarm_plan(&items, &keys, &v).unwrap();
        assert_eq!(plan.features.len(), 1);
        assert_eq!(plan.dropped_items, 2);
        assert_eq!(plan.dropped_users, 1);
        for (uid, item, value) in &plan.predictions {
            let Some(w) = v.weights.get(uid) else { continue };
            let f = featurize(&v.params, item).unwrap();
            assert_eq!(*value, crate::model::predict_point(w.as_slice(), &f).unwrap());
        }
    }
}
