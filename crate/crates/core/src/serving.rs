//! Request handling over sharded per-user state.
//!
//! Every model runs one writer thread per shard. `observe` appends to the
//! observation log and hands the update to the owning shard's queue while
//! still holding the log lock, so each shard applies updates in log order.
//! Reads take an `Arc` to the current [`Generation`] and never wait on each
//! other; a retrain or rollback installs a new generation with one pointer
//! swap.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering as AtomicOrdering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use crossbeam_channel::{bounded, Receiver, Sender};
use parking_lot::{Mutex, RwLock};
use rustc_hash::FxHashMap;
use serde::Serialize;

use crate::cache::{CacheConfig, CacheStats, Caches, FeatureKey, ModelId, PredictionKey};
use crate::cluster::{
    list_snapshots, load_snapshot, log_path, model_dir, read_active, read_log, save_snapshot, snapshot_path,
    write_active, LogOptions, ObservationLog, ShardMap,
};
use crate::error::{check_dim, Error, Result};
use crate::learner::{bootstrap_weights, UserLearnerState};
use crate::lifecycle::{
    ols_slope, staleness_check, ErrorSource, ErrorWindow, RunningMean, Staleness, StalenessConfig, VersionEntry,
    VersionHistory, VersionMetrics,
};
use crate::model::{dot, featurize, FeatureParams, Item, ModelSchema, ModelVersion, Observation, WeightVector};
use crate::trainer::{build_version, prewarm_plan, replay_online, retrain, AlsConfig, AlsReport};

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub data_dir: PathBuf,
    pub shards: usize,
    pub cache: CacheConfig,
    pub log: LogOptions,
    pub staleness: StalenessConfig,
    pub als: AlsConfig,
    /// Start retraining from the current θ instead of a fresh seeded init.
    pub warm_start: bool,
    /// Full snapshots kept for rollback: the newest `retain` versions plus the active one.
    pub retain: usize,
    /// Bound of each shard's update queue.
    pub queue_capacity: usize,
}

impl ServerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            data_dir: data_dir.into(),
            shards: 4,
            cache: CacheConfig::default(),
            log: LogOptions::default(),
            staleness: StalenessConfig::default(),
            als: AlsConfig::default(),
            warm_start: false,
            retain: VersionHistory::DEFAULT_RETAIN,
            queue_capacity: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub item: Item,
    pub score: f64,
    pub version: u64,
    pub cached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scored {
    pub item: Item,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopK {
    pub results: Vec<Scored>,
    /// Items skipped because θ has no features for them.
    pub skipped: usize,
    pub version: u64,
    /// The exploration bonus changed the top choice.
    pub exploratory: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ObserveAck {
    pub seq: u64,
    /// Squared error of the prediction served before this update.
    pub error: f64,
    pub version: u64,
    pub staleness: Staleness,
}

#[derive(Clone, Debug, Serialize)]
pub struct RetrainReport {
    pub version: u64,
    pub observations: u64,
    pub iterations: Option<usize>,
    pub train_rmse: Option<f64>,
    pub objective: Option<f64>,
    pub skipped_observations: usize,
    /// Observations that arrived during training and were applied before the swap.
    pub replayed_tail: usize,
    pub prewarmed_features: usize,
    pub prewarmed_predictions: usize,
}

/// Overrides for one retrain; unset fields keep the current settings.
#[derive(Clone, Debug, Default)]
pub struct RetrainOptions {
    pub dimension: Option<usize>,
    pub lambda: Option<f64>,
    pub als: Option<AlsConfig>,
}

pub struct RetrainHandle {
    pub version: u64,
    rx: Receiver<Result<RetrainReport>>,
}

impl RetrainHandle {
    pub fn wait(self) -> Result<RetrainReport> {
        self.rx
            .recv()
            .unwrap_or_else(|_| Err(Error::ShuttingDown("retrain".into())))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelStatus {
    pub name: String,
    pub version: u64,
    pub schema: ModelSchema,
    pub users: usize,
    pub log_seq: u64,
    pub retrain_in_flight: Option<u64>,
    pub staleness: Staleness,
    pub window_len: usize,
    pub trailing_error: Option<f64>,
    pub window_slope: f64,
    pub history: Vec<VersionEntry>,
    pub feature_cache: CacheStats,
    pub prediction_cache: CacheStats,
}

/// Upper-confidence score of one item: `(wᵀf, α·sqrt(fᵀA⁻¹f))` with
/// `w = A⁻¹b` taken from the learner.
pub fn bandit_score(state: &UserLearnerState, f: &[f64], alpha: f64) -> Result<(f64, f64)> {
    check_dim(state.dim(), f.len())?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be non-negative, got {alpha}")));
    }
    let mean = dot(state.solve_weights().as_slice(), f);
    let bonus = if alpha == 0.0 {
        0.0
    } else {
        alpha * state.quadratic_form(f)?.sqrt()
    };
    Ok((mean, bonus))
}

/// Higher score first, then smaller item.
struct Ranked<'a> {
    score: f64,
    item: &'a Item,
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.item.cmp(self.item))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked<'_> {}

/// Bounded min-heap keeping the `k` best candidates seen so far.
struct TopKHeap<'a> {
    k: usize,
    floor: f64,
    heap: BinaryHeap<std::cmp::Reverse<Ranked<'a>>>,
}

impl<'a> TopKHeap<'a> {
    fn new(k: usize) -> Self {
        TopKHeap {
            k,
            floor: f64::NEG_INFINITY,
            heap: BinaryHeap::with_capacity(k.min(1 << 16) + 1),
        }
    }

    fn offer(&mut self, score: f64, item: &'a Item) {
        // Strictly below the current k-th score cannot enter.
        if score < self.floor {
            return;
        }
        let cand = Ranked { score, item };
        if self.heap.len() < self.k {
            self.heap.push(std::cmp::Reverse(cand));
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if cand > worst.0 {
                *worst = std::cmp::Reverse(cand);
            }
        }
        if self.heap.len() == self.k {
            self.floor = self.heap.peek().map_or(f64::NEG_INFINITY, |w| w.0.score);
        }
    }

    fn into_sorted(self) -> Vec<Scored> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|std::cmp::Reverse(r)| Scored {
                item: r.item.clone(),
                score: r.score,
            })
            .collect()
    }
}

/// The `k` highest-scoring candidates, descending, ties by ascending item.
pub fn select_top_k<'a>(candidates: impl IntoIterator<Item = (&'a Item, f64)>, k: usize) -> Vec<Scored> {
    let mut heap = TopKHeap::new(k);
    for (item, score) in candidates {
        heap.offer(score, item);
    }
    heap.into_sorted()
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

struct UserEntry {
    learner: UserLearnerState,
    weights: WeightVector,
}

struct ShardTable {
    #[cfg(debug_assertions)]
    index: usize,
    users: FxHashMap<u64, UserEntry>,
}

/// One installed version: θ plus the live user tables, partitioned by shard.
struct Generation {
    version: u64,
    schema: ModelSchema,
    params: Arc<FeatureParams>,
    map: ShardMap,
    shards: Vec<RwLock<ShardTable>>,
    /// Bumped after every weight change; invalidates the bootstrap cache.
    epoch: AtomicU64,
    bootstrap: Mutex<Option<(u64, Arc<WeightVector>)>>,
}

impl Generation {
    fn new(v: ModelVersion, map: ShardMap) -> Self {
        let ModelVersion {
            schema,
            params,
            mut weights,
            learners,
            version,
            ..
        } = v;
        let mut tables: Vec<ShardTable> = (0..map.num_shards())
            .map(|_index| ShardTable {
                #[cfg(debug_assertions)]
                index: _index,
                users: FxHashMap::default(),
            })
            .collect();
        for (uid, learner) in learners {
            let weights = weights.remove(&uid).unwrap_or_else(|| learner.solve_weights());
            tables[map.route(uid)].users.insert(uid, UserEntry { learner, weights });
        }
        for (uid, weights) in weights {
            let learner = UserLearnerState::new(schema.dimension, schema.lambda);
            tables[map.route(uid)].users.insert(uid, UserEntry { learner, weights });
        }
        Generation {
            version,
            schema,
            params,
            map,
            shards: tables.into_iter().map(RwLock::new).collect(),
            epoch: AtomicU64::new(0),
            bootstrap: Mutex::new(None),
        }
    }

    fn users(&self) -> usize {
        self.shards.iter().map(|s| s.read().users.len()).sum()
    }

    /// Mean of all user weights, recomputed only after weights change.
    fn bootstrap(&self) -> Result<Arc<WeightVector>> {
        let epoch = self.epoch.load(AtomicOrdering::Acquire);
        if let Some((e, w)) = &*self.bootstrap.lock() {
            if *e == epoch {
                return Ok(w.clone());
            }
        }
        let guards: Vec<_> = self.shards.iter().map(|s| s.read()).collect();
        let mut users: Vec<(u64, &WeightVector)> = guards
            .iter()
            .flat_map(|g| g.users.iter().map(|(uid, e)| (*uid, &e.weights)))
            .collect();
        users.sort_unstable_by_key(|(uid, _)| *uid);
        let w = Arc::new(bootstrap_weights(users.into_iter().map(|(_, w)| w), self.schema.dimension)?);
        drop(guards);
        *self.bootstrap.lock() = Some((epoch, w.clone()));
        Ok(w)
    }

    fn export(&self, log_seq: u64, with_learners: bool) -> ModelVersion {
        let mut weights = BTreeMap::new();
        let mut learners = BTreeMap::new();
        for shard in &self.shards {
            let table = shard.read();
            for (uid, e) in &table.users {
                weights.insert(*uid, e.weights.clone());
                if with_learners {
                    learners.insert(*uid, e.learner.clone());
                }
            }
        }
        ModelVersion {
            schema: self.schema.clone(),
            params: self.params.clone(),
            weights,
            learners,
            version: self.version,
            log_seq,
        }
    }
}

enum Job {
    Observe {
        obs: Observation,
        seq: u64,
        version: u64,
        features: Arc<[f64]>,
        reply: Sender<Result<ObserveAck>>,
    },
    Barrier(Sender<()>),
    Stop,
}

struct Core {
    id: ModelId,
    name: String,
    dir: PathBuf,
    config: Arc<ServerConfig>,
    caches: Arc<Caches>,
    current: RwLock<Arc<Generation>>,
    log: Mutex<ObservationLog>,
    senders: Vec<Sender<Job>>,
    window: Mutex<ErrorWindow>,
    user_errors: Vec<Mutex<FxHashMap<u64, RunningMean>>>,
    history: Mutex<VersionHistory>,
    /// Serializes version installs (retrain swaps and rollbacks).
    control: Mutex<()>,
    retrain_thread: Mutex<Option<JoinHandle<()>>>,
}

impl Core {
    fn current(&self) -> Arc<Generation> {
        self.current.read().clone()
    }

    fn features(&self, gen: &Generation, item: &Item) -> Result<Arc<[f64]>> {
        if !self.caches.enabled() {
            return featurize(&gen.params, item);
        }
        let key = FeatureKey {
            model: self.id,
            version: gen.version,
            item: item.clone(),
        };
        if let Some(f) = self.caches.features.get(&key) {
            return Ok(f);
        }
        let f = featurize(&gen.params, item)?;
        self.caches.features.insert(key, f.clone());
        Ok(f)
    }

    fn predict(&self, uid: u64, item: Item) -> Result<Prediction> {
        let gen = self.current();
        let enabled = self.caches.enabled();
        let key = PredictionKey {
            model: self.id,
            version: gen.version,
            uid,
            item,
        };
        if enabled {
            if let Some(score) = self.caches.predictions.get(&key) {
                return Ok(Prediction {
                    item: key.item,
                    score,
                    version: gen.version,
                    cached: true,
                });
            }
        }
        let f = self.features(&gen, &key.item)?;
        let table = gen.shards[gen.map.route(uid)].read();
        let score = match table.users.get(&uid) {
            Some(e) => {
                let score = dot(e.weights.as_slice(), &f);
                if enabled {
                    // Inserted under the shard read lock, so an update to this
                    // user cannot purge before the stale value lands.
                    self.caches.predictions.insert(key.clone(), score);
                }
                score
            }
            None => {
                drop(table);
                dot(gen.bootstrap()?.as_slice(), &f)
            }
        };
        Ok(Prediction {
            item: key.item,
            score,
            version: gen.version,
            cached: false,
        })
    }

    fn top_k(&self, uid: u64, items: &[Item], k: usize) -> Result<TopK> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("topK needs at least one item".into()));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let gen = self.current();
        let alpha = gen.schema.alpha;
        let shard = &gen.shards[gen.map.route(uid)];
        let boot = if shard.read().users.contains_key(&uid) {
            None
        } else {
            Some(gen.bootstrap()?)
        };
        let table = shard.read();
        let entry = table.users.get(&uid);
        let fresh;
        let (w, learner): (&[f64], &UserLearnerState) = match (entry, &boot) {
            (Some(e), _) => (e.weights.as_slice(), &e.learner),
            (None, Some(b)) => {
                fresh = UserLearnerState::new(gen.schema.dimension, gen.schema.lambda);
                (b.as_slice(), &fresh)
            }
            (None, None) => unreachable!("users are never removed from a generation"),
        };
        let cache_means = self.caches.enabled() && entry.is_some();
        let cached = if cache_means {
            self.caches.predictions.get_many(self.id, gen.version, uid, items)
        } else {
            Vec::new()
        };
        let mut fresh_means = Vec::new();
        let mut heap = TopKHeap::new(k);
        let mut best_mean: Option<Ranked> = None;
        let mut skipped = 0;
        for (i, item) in items.iter().enumerate() {
            let hit = cached.get(i).copied().flatten();
            let (mean, bonus) = match hit {
                Some(mean) if alpha == 0.0 => (mean, 0.0),
                _ => {
                    let f = match self.features(&gen, item) {
                        Ok(f) => f,
                        Err(Error::UnknownItem(_)) => {
                            skipped += 1;
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                    let mean = hit.unwrap_or_else(|| {
                        let m = dot(w, &f);
                        if cache_means {
                            fresh_means.push((i, m));
                        }
                        m
                    });
                    let bonus = if alpha > 0.0 {
                        alpha * learner.quadratic_form(&f)?.sqrt()
                    } else {
                        0.0
                    };
                    (mean, bonus)
                }
            };
            if alpha > 0.0 {
                let cand = Ranked { score: mean, item };
                if best_mean.as_ref().is_none_or(|b| cand > *b) {
                    best_mean = Some(cand);
                }
            }
            heap.offer(mean + bonus, item);
        }
        if !fresh_means.is_empty() {
            self.caches.predictions.insert_many(fresh_means.into_iter().map(|(i, m)| {
                (
                    PredictionKey {
                        model: self.id,
                        version: gen.version,
                        uid,
                        item: items[i].clone(),
                    },
                    m,
                )
            }));
        }
        drop(table);
        let results = heap.into_sorted();
        let exploratory = match (results.first(), best_mean) {
            (Some(top), Some(best)) => top.item != *best.item,
            _ => false,
        };
        Ok(TopK {
            results,
            skipped,
            version: gen.version,
            exploratory,
        })
    }

    fn observe(self: &Arc<Self>, mut obs: Observation) -> Result<ObserveAck> {
        if !obs.label.is_finite() {
            return Err(Error::NonFinite("label"));
        }
        if obs.timestamp_ms == 0 {
            obs.timestamp_ms = now_ms();
        }
        let mut gen = self.current();
        let mut features = self.features(&gen, &obs.item)?;
        let (reply, rx) = bounded(1);
        {
            let mut log = self.log.lock();
            // Installs happen under the log lock; featurize again if one won the race.
            let installed = self.current();
            if !Arc::ptr_eq(&installed, &gen) {
                gen = installed;
                features = self.features(&gen, &obs.item)?;
            }
            let seq = log.append(&obs)?;
            let shard = gen.map.route(obs.uid);
            let job = Job::Observe {
                obs,
                seq,
                version: gen.version,
                features,
                reply,
            };
            self.senders[shard]
                .send(job)
                .map_err(|_| Error::ShuttingDown(self.name.clone()))?;
        }
        rx.recv().map_err(|_| Error::ShuttingDown(self.name.clone()))?
    }

    /// Online update of one user on its shard: score against the served
    /// weights, absorb, serve the new solution, purge the user's cached
    /// predictions.
    fn apply(&self, gen: &Generation, shard: usize, obs: &Observation, f: &[f64]) -> Result<f64> {
        debug_assert_eq!(gen.map.route(obs.uid), shard);
        let lock = &gen.shards[shard];
        let boot = if lock.read().users.contains_key(&obs.uid) {
            None
        } else {
            Some(gen.bootstrap()?)
        };
        let mut table = lock.write();
        #[cfg(debug_assertions)]
        debug_assert_eq!(table.index, shard);
        let entry = table.users.entry(obs.uid).or_insert_with(|| UserEntry {
            learner: UserLearnerState::new(gen.schema.dimension, gen.schema.lambda),
            weights: boot.map_or_else(|| WeightVector::zeros(gen.schema.dimension), |b| (*b).clone()),
        });
        let err = entry.learner.online_step(&mut entry.weights, f, obs.label)?;
        if self.caches.enabled() {
            self.caches.predictions.purge_user(self.id, obs.uid);
        }
        drop(table);
        gen.epoch.fetch_add(1, AtomicOrdering::Release);
        Ok(err)
    }

    fn process(self: &Arc<Self>, shard: usize, obs: Observation, seq: u64, version: u64, f: Arc<[f64]>) -> Result<ObserveAck> {
        let gen = self.current();
        let f = if gen.version == version {
            f
        } else {
            self.features(&gen, &obs.item)?
        };
        let error = self.apply(&gen, shard, &obs, &f)?;
        self.user_errors[shard].lock().entry(obs.uid).or_default().record(error);
        let cfg = &self.config.staleness;
        let staleness = {
            let mut window = self.window.lock();
            if cfg.source == ErrorSource::All || obs.exploratory {
                window.push(error);
            }
            staleness_check(&window, cfg.threshold_slope, cfg.min_window)
        };
        if staleness == Staleness::Stale && cfg.auto_retrain {
            match self.trigger_retrain("stale", RetrainOptions::default()) {
                Ok(h) => log::info!("{}: error trend is stale, retraining as version {}", self.name, h.version),
                Err(Error::RetrainInFlight(_)) => {}
                Err(e) => log::warn!("{}: could not start retrain: {e}", self.name),
            }
        }
        Ok(ObserveAck {
            seq,
            error,
            version: gen.version,
            staleness,
        })
    }

    fn worker(self: Arc<Self>, shard: usize, rx: Receiver<Job>) {
        for job in rx {
            match job {
                Job::Observe {
                    obs,
                    seq,
                    version,
                    features,
                    reply,
                } => {
                    let result = self.process(shard, obs, seq, version, features);
                    if let Err(e) = &result {
                        log::error!("{}: update {seq} failed on shard {shard}: {e}", self.name);
                    }
                    let _ = reply.send(result);
                }
                Job::Barrier(done) => {
                    let _ = done.send(());
                }
                Job::Stop => break,
            }
        }
    }

    /// Wait until every queued update has been applied. Callers hold the log
    /// lock so no new updates can be queued meanwhile.
    fn drain(&self) -> Result<()> {
        let (tx, rx) = bounded(self.senders.len());
        for s in &self.senders {
            s.send(Job::Barrier(tx.clone()))
                .map_err(|_| Error::ShuttingDown(self.name.clone()))?;
        }
        for _ in &self.senders {
            rx.recv().map_err(|_| Error::ShuttingDown(self.name.clone()))?;
        }
        Ok(())
    }

    fn trigger_retrain(self: &Arc<Self>, reason: &str, options: RetrainOptions) -> Result<RetrainHandle> {
        let version = self.history.lock().begin_retrain(&self.name, reason, now_ms())?;
        let (tx, rx) = bounded(1);
        let core = self.clone();
        let spawned = std::thread::Builder::new()
            .name(format!("retrain-{}", self.name))
            .spawn(move || {
                let result = core.run_retrain(version, &options);
                if let Err(e) = &result {
                    log::error!("{}: retrain to version {version} failed: {e}", core.name);
                    core.history.lock().fail_retrain(version);
                }
                let _ = tx.send(result);
            });
        let handle = match spawned {
            Ok(h) => h,
            Err(e) => {
                self.history.lock().fail_retrain(version);
                return Err(e.into());
            }
        };
        // The previous job has finished (nothing was in flight).
        let previous = self.retrain_thread.lock().replace(handle);
        if let Some(previous) = previous {
            let _ = previous.join();
        }
        Ok(RetrainHandle { version, rx })
    }

    fn run_retrain(&self, version: u64, options: &RetrainOptions) -> Result<RetrainReport> {
        let captured = {
            let mut log = self.log.lock();
            log.flush()?;
            log.last_seq()
        };
        let path = log_path(&self.config.data_dir, &self.name);
        let records: Vec<Observation> = read_log(&path)?
            .into_iter()
            .take_while(|r| r.seq <= captured)
            .map(|r| r.observation)
            .collect();
        let mut old = self.current().export(captured, false);
        let mut schema = old.schema.clone();
        schema.dimension = options.dimension.unwrap_or(schema.dimension);
        schema.lambda = options.lambda.unwrap_or(schema.lambda);
        schema.validate()?;
        if schema.dimension != old.schema.dimension && old.params.factor_table().is_none() {
            return Err(Error::InvalidArgument("computed features have a fixed dimension".into()));
        }
        let warm = self.config.warm_start && schema.dimension == old.schema.dimension;
        let als = options.als.as_ref().unwrap_or(&self.config.als);
        let trained = retrain(&records, &schema, &old, warm, als)?;
        old.schema = schema;
        let als: Option<AlsReport> = trained.report.clone();
        let built = build_version(trained, &old, &records, captured)?;
        let mut v = built.version;
        v.version = version;
        save_snapshot(&self.dir, &v)?;
        let snapshot = Arc::new(v.clone());
        let metrics = VersionMetrics {
            users: v.weights.len(),
            items: v.params.factor_table().map_or(0, |t| t.len()),
            observations: captured,
            train_rmse: als.as_ref().map(|r| r.train_rmse),
            objective: als.as_ref().and_then(|r| r.objective_history.last().copied()),
            retired_trailing_error: None,
        };

        let _control = self.control.lock();
        let (replayed_tail, prewarmed, retired_error) = {
            let mut log = self.log.lock();
            self.drain()?;
            log.flush()?;
            let tail: Vec<Observation> = read_log(&path)?
                .into_iter()
                .filter(|r| r.seq > captured)
                .map(|r| r.observation)
                .collect();
            replay_online(&mut v, &tail)?;
            let old_version = self.current().version;
            let prewarmed = if self.caches.enabled() {
                let items = self.caches.features.items_for(self.id, old_version);
                let keys = self.caches.predictions.keys_for(self.id, old_version);
                let plan = prewarm_plan(&items, &keys, &v)?;
                let counts = (plan.features.len(), plan.predictions.len());
                for (item, f) in plan.features {
                    let key = FeatureKey {
                        model: self.id,
                        version,
                        item,
                    };
                    self.caches.features.insert(key, f);
                }
                self.caches.predictions.insert_many(plan.predictions.into_iter().map(|(uid, item, score)| {
                    (
                        PredictionKey {
                            model: self.id,
                            version,
                            uid,
                            item,
                        },
                        score,
                    )
                }));
                counts
            } else {
                (0, 0)
            };
            *self.current.write() = Arc::new(Generation::new(v, ShardMap::new(self.config.shards)?));
            self.caches.features.purge(self.id, Some(version));
            self.caches.predictions.purge(self.id, Some(version));
            let retired_error = {
                let mut window = self.window.lock();
                let mean = window.mean();
                window.clear();
                mean
            };
            (tail.len(), prewarmed, retired_error)
        };
        write_active(&self.dir, version)?;
        let retained = {
            let mut history = self.history.lock();
            history.complete_retrain(snapshot, metrics.clone(), retired_error, now_ms())?;
            history.retained()
        };
        self.remove_unretained_snapshots(&retained);
        Ok(RetrainReport {
            version,
            observations: captured,
            iterations: als.as_ref().map(|r| r.iterations),
            train_rmse: metrics.train_rmse,
            objective: metrics.objective,
            skipped_observations: built.skipped_observations,
            replayed_tail,
            prewarmed_features: prewarmed.0,
            prewarmed_predictions: prewarmed.1,
        })
    }

    fn remove_unretained_snapshots(&self, retained: &[u64]) {
        match list_snapshots(&self.dir) {
            Ok(on_disk) => {
                for v in on_disk.into_iter().filter(|v| !retained.contains(v)) {
                    if let Err(e) = std::fs::remove_file(snapshot_path(&self.dir, v)) {
                        log::warn!("{}: could not remove snapshot {v}: {e}", self.name);
                    }
                }
            }
            Err(e) => log::warn!("{}: could not list snapshots: {e}", self.name),
        }
    }

    fn rollback(&self, target: u64) -> Result<()> {
        let _control = self.control.lock();
        let snapshot = {
            let history = self.history.lock();
            if history.in_flight().is_some() {
                return Err(Error::RetrainInFlight(self.name.clone()));
            }
            history.rollback_target(target)?
        };
        let mut v = (*snapshot).clone();
        {
            let mut log = self.log.lock();
            self.drain()?;
            log.flush()?;
            let tail: Vec<Observation> = read_log(log.path())?
                .into_iter()
                .filter(|r| r.seq > v.log_seq)
                .map(|r| r.observation)
                .collect();
            replay_online(&mut v, &tail)?;
            *self.current.write() = Arc::new(Generation::new(v, ShardMap::new(self.config.shards)?));
            self.caches.features.purge(self.id, None);
            self.caches.predictions.purge(self.id, None);
            self.window.lock().clear();
        }
        self.history.lock().activate(target)?;
        write_active(&self.dir, target)
    }

    fn export(&self) -> Result<ModelVersion> {
        let log = self.log.lock();
        self.drain()?;
        Ok(self.current().export(log.last_seq(), true))
    }

    fn status(&self) -> ModelStatus {
        let gen = self.current();
        let cfg = &self.config.staleness;
        let (staleness, window_len, trailing_error, window_slope) = {
            let w = self.window.lock();
            (
                staleness_check(&w, cfg.threshold_slope, cfg.min_window),
                w.len(),
                w.mean(),
                ols_slope(w.values()),
            )
        };
        let history = self.history.lock();
        ModelStatus {
            name: self.name.clone(),
            version: gen.version,
            schema: gen.schema.clone(),
            users: gen.users(),
            log_seq: self.log.lock().last_seq(),
            retrain_in_flight: history.in_flight(),
            staleness,
            window_len,
            trailing_error,
            window_slope,
            history: history.entries().to_vec(),
            feature_cache: self.caches.features.stats(),
            prediction_cache: self.caches.predictions.stats(),
        }
    }
}

/// A served model: its state, log, shard workers and version history.
pub struct Model {
    core: Arc<Core>,
    workers: Vec<JoinHandle<()>>,
}

impl Model {
    fn open(id: ModelId, name: &str, config: Arc<ServerConfig>, caches: Arc<Caches>) -> Result<Model> {
        let dir = model_dir(&config.data_dir, name);
        let active = read_active(&dir)?.ok_or_else(|| Error::UnknownModel(name.to_string()))?;
        let mut snapshots = Vec::new();
        let mut on_disk = list_snapshots(&dir)?;
        on_disk.retain(|&v| v != active);
        on_disk.reverse();
        on_disk.truncate(config.retain);
        on_disk.push(active);
        for v in on_disk {
            let snap = load_snapshot(&snapshot_path(&dir, v))?;
            if snap.schema.name != name || snap.version != v {
                return Err(Error::corrupt("snapshot", format!("snap-{v} holds {} v{}", snap.schema.name, snap.version)));
            }
            snapshots.push(Arc::new(snap));
        }
        let active_snapshot = snapshots.last().expect("active snapshot pushed last").clone();

        let (log, records) = ObservationLog::open(&log_path(&config.data_dir, name), name, config.log)?;
        if log.last_seq() < active_snapshot.log_seq {
            return Err(Error::corrupt(
                "observation log",
                format!("ends at {} but snapshot {active} reflects {}", log.last_seq(), active_snapshot.log_seq),
            ));
        }
        let mut v = (*active_snapshot).clone();
        let tail: Vec<Observation> = records
            .into_iter()
            .filter(|r| r.seq > v.log_seq)
            .map(|r| r.observation)
            .collect();
        let skipped = replay_online(&mut v, &tail)?;
        log::info!(
            "{name}: recovered version {active} and replayed {} observations ({skipped} skipped)",
            tail.len()
        );
        let history = VersionHistory::recovered(snapshots, active, now_ms(), config.retain)?;
        let map = ShardMap::new(config.shards)?;

        let mut senders = Vec::new();
        let mut receivers = Vec::new();
        for _ in 0..map.num_shards() {
            let (tx, rx) = bounded(config.queue_capacity.max(1));
            senders.push(tx);
            receivers.push(rx);
        }
        let core = Arc::new(Core {
            id,
            name: name.to_string(),
            dir,
            caches,
            current: RwLock::new(Arc::new(Generation::new(v, map))),
            log: Mutex::new(log),
            senders,
            window: Mutex::new(ErrorWindow::new(config.staleness.window)),
            user_errors: (0..map.num_shards()).map(|_| Mutex::new(FxHashMap::default())).collect(),
            history: Mutex::new(history),
            control: Mutex::new(()),
            retrain_thread: Mutex::new(None),
            config,
        });
        let mut workers = Vec::new();
        for (shard, rx) in receivers.into_iter().enumerate() {
            let core = core.clone();
            workers.push(
                std::thread::Builder::new()
                    .name(format!("{name}-shard-{shard}"))
                    .spawn(move || core.worker(shard, rx))?,
            );
        }
        Ok(Model { core, workers })
    }

    pub fn name(&self) -> &str {
        &self.core.name
    }

    pub fn id(&self) -> ModelId {
        self.core.id
    }

    pub fn version(&self) -> u64 {
        self.core.current().version
    }

    pub fn schema(&self) -> ModelSchema {
        self.core.current().schema.clone()
    }

    pub fn predict(&self, uid: u64, item: impl Into<Item>) -> Result<Prediction> {
        self.core.predict(uid, item.into())
    }

    pub fn top_k(&self, uid: u64, items: &[Item], k: usize) -> Result<TopK> {
        self.core.top_k(uid, items, k)
    }

    pub fn observe(&self, obs: Observation) -> Result<ObserveAck> {
        self.core.observe(obs)
    }

    /// Start an offline retrain on a background thread.
    pub fn trigger_retrain(&self, reason: &str) -> Result<RetrainHandle> {
        self.core.trigger_retrain(reason, RetrainOptions::default())
    }

    pub fn trigger_retrain_with(&self, reason: &str, options: RetrainOptions) -> Result<RetrainHandle> {
        self.core.trigger_retrain(reason, options)
    }

    pub fn rollback(&self, version: u64) -> Result<()> {
        self.core.rollback(version)
    }

    pub fn status(&self) -> ModelStatus {
        self.core.status()
    }

    /// Running mean squared error for one user.
    pub fn user_error(&self, uid: u64) -> Option<RunningMean> {
        let shard = self.core.current().map.route(uid);
        self.core.user_errors[shard].lock().get(&uid).copied()
    }

    /// The full live state (all queued updates applied).
    pub fn export(&self) -> Result<ModelVersion> {
        self.core.export()
    }

    pub fn flush_log(&self) -> Result<()> {
        self.core.log.lock().flush()
    }
}

impl Drop for Model {
    fn drop(&mut self) {
        for s in &self.core.senders {
            let _ = s.send(Job::Stop);
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
        if let Some(t) = self.core.retrain_thread.lock().take() {
            let _ = t.join();
        }
    }
}

/// The registry of served models and the process-wide caches.
pub struct Server {
    config: Arc<ServerConfig>,
    caches: Arc<Caches>,
    models: RwLock<BTreeMap<String, Arc<Model>>>,
    next_id: AtomicU32,
}

impl Server {
    /// Start with no models loaded.
    pub fn new(config: ServerConfig) -> Result<Self> {
        std::fs::create_dir_all(&config.data_dir)?;
        ShardMap::new(config.shards)?;
        Ok(Server {
            caches: Arc::new(Caches::new(config.cache.clone())),
            config: Arc::new(config),
            models: RwLock::new(BTreeMap::new()),
            next_id: AtomicU32::new(0),
        })
    }

    /// Start and recover every model found in the data directory.
    pub fn open(config: ServerConfig) -> Result<Self> {
        let server = Server::new(config)?;
        let mut names = Vec::new();
        for entry in std::fs::read_dir(&server.config.data_dir)? {
            let entry = entry?;
            if entry.path().join("ACTIVE").is_file() {
                if let Some(name) = entry.file_name().to_str() {
                    names.push(name.to_string());
                }
            }
        }
        names.sort();
        for name in names {
            server.load(&name)?;
        }
        Ok(server)
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn caches(&self) -> &Caches {
        &self.caches
    }

    pub fn data_dir(&self) -> &Path {
        &self.config.data_dir
    }

    fn load(&self, name: &str) -> Result<Arc<Model>> {
        let mut models = self.models.write();
        if models.contains_key(name) {
            return Err(Error::ModelExists(name.to_string()));
        }
        let id = self.next_id.fetch_add(1, AtomicOrdering::Relaxed);
        let model = Arc::new(Model::open(id, name, self.config.clone(), self.caches.clone())?);
        models.insert(name.to_string(), model.clone());
        Ok(model)
    }

    /// Register a new, untrained model.
    pub fn create_model(&self, schema: ModelSchema, params: FeatureParams) -> Result<Arc<Model>> {
        self.create_model_from(ModelVersion::initial(schema, params)?)
    }

    /// Register a new model starting from an existing version.
    pub fn create_model_from(&self, version: ModelVersion) -> Result<Arc<Model>> {
        version.validate()?;
        let name = version.schema.name.clone();
        let dir = model_dir(&self.config.data_dir, &name);
        if self.models.read().contains_key(&name) || read_active(&dir)?.is_some() {
            return Err(Error::ModelExists(name));
        }
        let existing = read_log(&log_path(&self.config.data_dir, &name))?;
        if existing.last().is_some_and(|r| r.seq > version.log_seq) && version.log_seq > 0 {
            return Err(Error::InvalidArgument(format!("log of {name} is ahead of the supplied version")));
        }
        save_snapshot(&dir, &version)?;
        write_active(&dir, version.version)?;
        self.load(&name)
    }

    pub fn model(&self, name: &str) -> Result<Arc<Model>> {
        self.models
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownModel(name.to_string()))
    }

    pub fn model_names(&self) -> Vec<String> {
        self.models.read().keys().cloned().collect()
    }

    pub fn predict(&self, model: &str, uid: u64, item: impl Into<Item>) -> Result<Prediction> {
        self.model(model)?.predict(uid, item)
    }

    pub fn top_k(&self, model: &str, uid: u64, items: &[Item], k: usize) -> Result<TopK> {
        self.model(model)?.top_k(uid, items, k)
    }

    pub fn observe(&self, model: &str, obs: Observation) -> Result<ObserveAck> {
        self.model(model)?.observe(obs)
    }

    pub fn trigger_retrain(&self, model: &str, reason: &str) -> Result<RetrainHandle> {
        self.model(model)?.trigger_retrain(reason)
    }

    pub fn rollback(&self, model: &str, version: u64) -> Result<()> {
        self.model(model)?.rollback(version)
    }

    pub fn status(&self, model: &str) -> Result<ModelStatus> {
        Ok(self.model(model)?.status())
    }

    /// Stop all models' workers and flush their logs.
    pub fn shutdown(&self) {
        let models = std::mem::take(&mut *self.models.write());
        for (name, model) in models {
            if let Err(e) = model.flush_log() {
                log::error!("{name}: final log flush failed: {e}");
            }
        }
    }
}
