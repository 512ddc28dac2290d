//! Model quality monitoring and version bookkeeping.
//!
//! Cross-validated errors feed per-user running means and a trailing global
//! window. A model is stale when an OLS line through the window rises faster
//! than a configured slope.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelVersion;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RunningMean {
    pub mean: f64,
    pub count: u64,
}

impl RunningMean {
    pub fn record(&mut self, x: f64) {
        self.count += 1;
        self.mean += (x - self.mean) / self.count as f64;
    }
}

/// Which observations feed the staleness window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorSource {
    All,
    /// Only observations whose serving decision was exploratory.
    Exploratory,
}

/// Ring buffer of the most recent cross-validated errors.
#[derive(Clone, Debug)]
pub struct ErrorWindow {
    capacity: usize,
    buf: VecDeque<f64>,
}

impl ErrorWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        ErrorWindow {
            capacity,
            buf: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, e: f64) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.buf.clear();
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.buf.iter().copied()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.buf.is_empty()).then(|| self.buf.iter().sum::<f64>() / self.buf.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct ErrorAggregate {
    per_user: HashMap<u64, RunningMean>,
    window: ErrorWindow,
}

impl ErrorAggregate {
    pub fn new(window: usize) -> Self {
        ErrorAggregate {
            per_user: HashMap::new(),
            window: ErrorWindow::new(window),
        }
    }

    pub fn record_error(&mut self, uid: u64, squared_error: f64) {
        debug_assert!(squared_error >= 0.0 && squared_error.is_finite());
        self.per_user.entry(uid).or_default().record(squared_error);
        self.window.push(squared_error);
    }

    pub fn user(&self, uid: u64) -> Option<RunningMean> {
        self.per_user.get(&uid).copied()
    }

    pub fn window(&self) -> &ErrorWindow {
        &self.window
    }

    pub fn reset_window(&mut self) {
        self.window.clear();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Staleness {
    Fresh,
    Stale,
}

/// Least-squares slope of `values` against their index; 0 for fewer than two
/// points.
pub fn ols_slope<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    for (i, y) in values.into_iter().enumerate() {
        let x = i as f64;
        n += 1.0;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let denom = n * sxx - sx * sx;
    if n < 2.0 || denom == 0.0 {
        0.0
    } else {
        (n * sxy - sx * sy) / denom
    }
}

pub fn staleness_check(window: &ErrorWindow, threshold_slope: f64, min_window: usize) -> Staleness {
    if window.len() < min_window.max(2) {
        return Staleness::Fresh;
    }
    if ols_slope(window.values()) > threshold_slope {
        Staleness::Stale
    } else {
        Staleness::Fresh
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StalenessConfig {
    pub window: usize,
    pub min_window: usize,
    /// Error increase per observation above which the model is stale.
    pub threshold_slope: f64,
    pub source: ErrorSource,
    /// Start a retrain automatically when the check fires.
    pub auto_retrain: bool,
}

impl Default for StalenessConfig {
    fn default() -> Self {
        StalenessConfig {
            window: 500,
            min_window: 100,
            threshold_slope: 0.01,
            source: ErrorSource::All,
            auto_retrain: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VersionMetrics {
    pub users: usize,
    pub items: usize,
    pub observations: u64,
    pub train_rmse: Option<f64>,
    pub objective: Option<f64>,
    /// Trailing mean cross-validated error when this version was retired.
    pub retired_trailing_error: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionStatus {
    Pending,
    Active,
    Retired,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct VersionEntry {
    pub version: u64,
    pub created_at_ms: u64,
    pub status: VersionStatus,
    pub reason: String,
    pub metrics: VersionMetrics,
    #[serde(skip)]
    pub snapshot: Option<Arc<ModelVersion>>,
}

/// Ordered version records plus the active pointer. Full snapshots are kept
/// for the newest `retain` versions and always for the active one.
#[derive(Clone, Debug)]
pub struct VersionHistory {
    entries: Vec<VersionEntry>,
    active: u64,
    retain: usize,
}

impl VersionHistory {
    pub const DEFAULT_RETAIN: usize = 3;

    pub fn new(initial: Arc<ModelVersion>, created_at_ms: u64, metrics: VersionMetrics, retain: usize) -> Self {
        let version = initial.version;
        VersionHistory {
            entries: vec![VersionEntry {
                version,
                created_at_ms,
                status: VersionStatus::Active,
                reason: "initial".into(),
                metrics,
                snapshot: Some(initial),
            }],
            active: version,
            retain: retain.max(1),
        }
    }

    /// Rebuild a history from snapshots found on disk after a restart.
    pub fn recovered(mut snapshots: Vec<Arc<ModelVersion>>, active: u64, now_ms: u64, retain: usize) -> Result<Self> {
        if !snapshots.iter().any(|s| s.version == active) {
            return Err(Error::UnknownVersion(active));
        }
        snapshots.sort_by_key(|s| s.version);
        let entries = snapshots
            .into_iter()
            .map(|s| VersionEntry {
                version: s.version,
                created_at_ms: now_ms,
                status: if s.version == active {
                    VersionStatus::Active
                } else {
                    VersionStatus::Retired
                },
                reason: "recovered".into(),
                metrics: VersionMetrics {
                    users: s.weights.len(),
                    items: s.params.factor_table().map_or(0, |t| t.len()),
                    observations: s.log_seq,
                    ..VersionMetrics::default()
                },
                snapshot: Some(s),
            })
            .collect();
        let mut history = VersionHistory {
            entries,
            active,
            retain: retain.max(1),
        };
        history.prune();
        Ok(history)
    }

    pub fn active(&self) -> u64 {
        self.active
    }

    pub fn entries(&self) -> &[VersionEntry] {
        &self.entries
    }

    pub fn in_flight(&self) -> Option<u64> {
        self.entries
            .iter()
            .find(|e| e.status == VersionStatus::Pending)
            .map(|e| e.version)
    }

    pub fn latest_version(&self) -> u64 {
        self.entries.iter().map(|e| e.version).max().unwrap_or(0)
    }

    /// Reserve the next version number for a retrain.
    pub fn begin_retrain(&mut self, model: &str, reason: &str, now_ms: u64) -> Result<u64> {
        if self.in_flight().is_some() {
            return Err(Error::RetrainInFlight(model.to_string()));
        }
        let version = self.latest_version() + 1;
        self.entries.push(VersionEntry {
            version,
            created_at_ms: now_ms,
            status: VersionStatus::Pending,
            reason: reason.to_string(),
            metrics: VersionMetrics::default(),
            snapshot: None,
        });
        Ok(version)
    }

    pub fn fail_retrain(&mut self, version: u64) {
        if let Some(e) = self.entry_mut(version) {
            e.status = VersionStatus::Failed;
        }
    }

    /// Install a completed version as active.
    pub fn complete_retrain(
        &mut self,
        snapshot: Arc<ModelVersion>,
        metrics: VersionMetrics,
        retired_trailing_error: Option<f64>,
        now_ms: u64,
    ) -> Result<()> {
        let version = snapshot.version;
        let previous = self.active;
        if let Some(prev) = self.entry_mut(previous) {
            prev.status = VersionStatus::Retired;
            prev.metrics.retired_trailing_error = retired_trailing_error;
        }
        let entry = self.entry_mut(version).ok_or(Error::UnknownVersion(version))?;
        entry.status = VersionStatus::Active;
        entry.created_at_ms = now_ms;
        entry.metrics = metrics;
        entry.snapshot = Some(snapshot);
        self.active = version;
        self.prune();
        Ok(())
    }

    /// Snapshot to restore for a rollback to `target`.
    pub fn rollback_target(&self, target: u64) -> Result<Arc<ModelVersion>> {
        self.entries
            .iter()
            .find(|e| e.version == target)
            .and_then(|e| e.snapshot.clone())
            .ok_or(Error::UnknownVersion(target))
    }

    /// Move the active pointer to a retained version.
    pub fn activate(&mut self, target: u64) -> Result<()> {
        self.rollback_target(target)?;
        let previous = self.active;
        if let Some(prev) = self.entry_mut(previous) {
            prev.status = VersionStatus::Retired;
        }
        if let Some(e) = self.entry_mut(target) {
            e.status = VersionStatus::Active;
        }
        self.active = target;
        Ok(())
    }

    /// Versions that still hold a full snapshot.
    pub fn retained(&self) -> Vec<u64> {
        self.entries
            .iter()
            .filter(|e| e.snapshot.is_some())
            .map(|e| e.version)
            .collect()
    }

    fn entry_mut(&mut self, version: u64) -> Option<&mut VersionEntry> {
        self.entries.iter_mut().find(|e| e.version == version)
    }

    fn prune(&mut self) {
        let mut with_snapshot: Vec<u64> = self.retained();
        with_snapshot.sort_unstable_by(|a, b| b.cmp(a));
        let keep: Vec<u64> = with_snapshot.into_iter().take(self.retain).collect();
        let active = self.active;
        for e in &mut self.entries {
            if e.version != active && !keep.contains(&e.version) {
                e.snapshot = None;
            }
        }
    }
}
