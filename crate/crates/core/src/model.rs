//! Model mathematics: personalized linear prediction `score = w_u · f(x, θ)`,
//! the matrix-factorization objective, and the feature-function contract.
//!
//! A model pairs global feature parameters θ ([`FeatureParams`]) with one
//! [`WeightVector`] per user. θ is either a materialized table of item
//! factors or a computed basis-function family evaluated on raw inputs.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::learner::UserLearnerState;

/// Default ridge penalty when a schema does not specify one.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Raw real-valued input for computed feature functions.
///
/// Equality, hashing and ordering use the IEEE total order so raw inputs can
/// be used as cache keys.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RawInput(pub Vec<f64>);

impl PartialEq for RawInput {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for RawInput {}

impl Hash for RawInput {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.len().hash(state);
        for v in &self.0 {
            v.to_bits().hash(state);
        }
    }
}

impl Ord for RawInput {
    fn cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.total_cmp(b) {
                Ordering::Equal => continue,
                ord => return ord,
            }
        }
        self.0.len().cmp(&other.0.len())
    }
}

impl PartialOrd for RawInput {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Item descriptor: an id for materialized models, a raw input vector for
/// computed ones. Ids order before raw inputs; ids order numerically.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Item {
    Id(u64),
    Raw(RawInput),
}

impl Item {
    pub fn raw(values: Vec<f64>) -> Self {
        Item::Raw(RawInput(values))
    }

    pub fn id(&self) -> Option<u64> {
        match self {
            Item::Id(id) => Some(*id),
            Item::Raw(_) => None,
        }
    }
}

impl From<u64> for Item {
    fn from(id: u64) -> Self {
        Item::Id(id)
    }
}

impl fmt::Display for Item {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Item::Id(id) => write!(f, "{id}"),
            Item::Raw(raw) => write!(f, "{:?}", raw.0),
        }
    }
}

/// Per-user weights `w_u`, always finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "weight vector")?;
        Ok(WeightVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        WeightVector(vec![0.0; dim])
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        WeightVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        WeightVector::new(self.0.iter().map(|v| v * c).collect())
    }
}

/// Materialized feature function: item id → factor vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorTable {
    dim: usize,
    factors: FxHashMap<u64, Arc<[f64]>>,
}

impl FactorTable {
    pub fn new(dim: usize) -> Self {
        FactorTable {
            dim,
            factors: FxHashMap::default(),
        }
    }

    pub fn from_rows<I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, Vec<f64>)>,
    {
        let mut table = FactorTable::new(dim);
        for (id, row) in rows {
            table.insert(id, row)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, item: u64, factors: Vec<f64>) -> Result<()> {
        check_dim(self.dim, factors.len())?;
        check_finite(&factors, "item factors")?;
        self.factors.insert(item, factors.into());
        Ok(())
    }

    pub fn get(&self, item: u64) -> Option<&Arc<[f64]>> {
        self.factors.get(&item)
    }

    pub fn contains(&self, item: u64) -> bool {
        self.factors.contains_key(&item)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Rows in ascending item-id order.
    pub fn sorted_rows(&self) -> Vec<(u64, &[f64])> {
        let mut rows: Vec<_> = self.factors.iter().map(|(k, v)| (*k, &v[..])).collect();
        rows.sort_unstable_by_key(|(k, _)| *k);
        rows
    }
}

/// Computed feature function: Gaussian radial basis functions
/// `exp(-|x - c_j|^2 / (2 σ^2))`, one output per center.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfBasis {
    input_dim: usize,
    bandwidth: f64,
    /// Row-major, `num_centers × input_dim`.
    centers: Vec<f64>,
}

impl RbfBasis {
    pub fn new(input_dim: usize, centers: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        if input_dim == 0 || centers.is_empty() {
            return Err(Error::InvalidArgument(
                "rbf basis needs a positive input dimension and at least one center".into(),
            ));
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rbf bandwidth must be positive, got {bandwidth}"
            )));
        }
        let mut flat = Vec::with_capacity(centers.len() * input_dim);
        for c in centers {
            check_dim(input_dim, c.len())?;
            check_finite(&c, "rbf center")?;
            flat.extend(c);
        }
        Ok(RbfBasis {
            input_dim,
            bandwidth,
            centers: flat,
        })
    }

    /// Inverse of [`RbfBasis::coefficients`].
    pub fn from_coefficients(input_dim: usize, coefficients: &[f64]) -> Result<Self> {
        let (&bandwidth, flat) = coefficients
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("empty rbf coefficients".into()))?;
        if input_dim == 0 || flat.is_empty() || flat.len() % input_dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} center coefficients do not divide into inputs of dimension {input_dim}",
                flat.len()
            )));
        }
        RbfBasis::new(
            input_dim,
            flat.chunks(input_dim).map(<[f64]>::to_vec).collect(),
            bandwidth,
        )
    }

    /// Flat parameter vector: `[bandwidth, c_1 .., c_m]`.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(1 + self.centers.len());
        out.push(self.bandwidth);
        out.extend_from_slice(&self.centers);
        out
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn num_centers(&self) -> usize {
        self.centers.len() / self.input_dim
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim, x.len())?;
        check_finite(x, "raw item input")?;
        let denom = 2.0 * self.bandwidth * self.bandwidth;
        Ok(self
            .centers
            .chunks(self.input_dim)
            .map(|c| {
                let sq: f64 = c.iter().zip(x).map(|(ci, xi)| (xi - ci) * (xi - ci)).sum();
                (-sq / denom).exp()
            })
            .collect())
    }
}

/// The feature-function plug-in contract: map an item to a `d`-dimensional
/// feature vector, either by lookup (materialized) or by computation.
pub trait FeatureFunction: Send + Sync {
    fn dim(&self) -> usize;

    fn materialized(&self) -> bool;

    fn features(&self, item: &Item) -> Result<Arc<[f64]>>;
}

impl FeatureFunction for FactorTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn materialized(&self) -> bool {
        true
    }

    fn features(&self, item: &Item) -> Result<Arc<[f64]>> {
        match item {
            Item::Id(id) => self
                .factors
                .get(id)
                .cloned()
                .ok_or_else(|| Error::UnknownItem(item.clone())),
            Item::Raw(_) => Err(Error::InvalidArgument(
                "materialized model expects an item id".into(),
            )),
        }
    }
}

impl FeatureFunction for RbfBasis {
    fn dim(&self) -> usize {
        self.num_centers()
    }

    fn materialized(&self) -> bool {
        false
    }

    fn features(&self, item: &Item) -> Result<Arc<[f64]>> {
        match item {
            Item::Raw(raw) => Ok(self.evaluate(&raw.0)?.into()),
            Item::Id(_) => Err(Error::InvalidArgument(
                "computed model expects a raw input vector".into(),
            )),
        }
    }
}

/// Global feature parameters θ.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureParams {
    Materialized(FactorTable),
    Computed(RbfBasis),
}

impl FeatureParams {
    pub fn factor_table(&self) -> Option<&FactorTable> {
        match self {
            FeatureParams::Materialized(t) => Some(t),
            FeatureParams::Computed(_) => None,
        }
    }

    fn inner(&self) -> &dyn FeatureFunction {
        match self {
            FeatureParams::Materialized(t) => t,
            FeatureParams::Computed(b) => b,
        }
    }
}

impl FeatureFunction for FeatureParams {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn materialized(&self) -> bool {
        self.inner().materialized()
    }

    fn features(&self, item: &Item) -> Result<Arc<[f64]>> {
        self.inner().features(item)
    }
}

/// Evaluate θ on an item.
pub fn featurize(params: &FeatureParams, item: &Item) -> Result<Arc<[f64]>> {
    params.features(item)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSchema {
    pub name: String,
    pub dimension: usize,
    /// Ridge penalty λ.
    pub lambda: f64,
    /// Exploration weight α of the uncertainty bonus in top-K.
    pub alpha: f64,
}

impl ModelSchema {
    pub fn new(name: impl Into<String>, dimension: usize, lambda: f64, alpha: f64) -> Result<Self> {
        let schema = ModelSchema {
            name: name.into(),
            dimension,
            lambda,
            alpha,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(Error::InvalidSchema(format!(
                "model name {:?} must be non-empty [A-Za-z0-9_-]",
                self.name
            )));
        }
        if self.dimension == 0 {
            return Err(Error::InvalidSchema("dimension must be at least 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidSchema(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidSchema(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..4 {
            acc[k] += ca[k] * cb[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Point prediction `wᵀf`.
pub fn predict_point(w: &[f64], f: &[f64]) -> Result<f64> {
    check_dim(w.len(), f.len())?;
    Ok(dot(w, f))
}

/// A single explicit rating used for training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rating {
    pub uid: u64,
    pub item: u64,
    pub value: f64,
}

/// One unit of feedback: a label for a (user, item) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub uid: u64,
    pub item: Item,
    pub label: f64,
    pub timestamp_ms: u64,
    /// The item was served by an exploratory (uncertainty-driven) choice.
    pub exploratory: bool,
}

impl Observation {
    pub fn new(uid: u64, item: impl Into<Item>, label: f64) -> Self {
        Observation {
            uid,
            item: item.into(),
            label,
            timestamp_ms: 0,
            exploratory: false,
        }
    }

    pub fn rating(&self) -> Option<Rating> {
        self.item.id().map(|item| Rating {
            uid: self.uid,
            item,
            value: self.label,
        })
    }
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// `λ(‖W‖² + ‖X‖²) + Σ (r_ui − w_uᵀx_i)²` over the given ratings.
pub fn mf_objective(
    weights: &BTreeMap<u64, WeightVector>,
    factors: &FactorTable,
    ratings: &[Rating],
    lambda: f64,
) -> Result<f64> {
    let mut penalty = CompensatedSum::default();
    for w in weights.values() {
        check_dim(factors.dim(), w.dim())?;
        penalty.add(dot(w.as_slice(), w.as_slice()));
    }
    for (_, x) in factors.sorted_rows() {
        penalty.add(dot(x, x));
    }
    let mut loss = CompensatedSum::default();
    for r in ratings {
        let w = weights.get(&r.uid).ok_or(Error::UnknownUser(r.uid))?;
        let x = factors
            .get(r.item)
            .ok_or(Error::UnknownItem(Item::Id(r.item)))?;
        let resid = r.value - dot(w.as_slice(), x);
        loss.add(resid * resid);
    }
    Ok(lambda * penalty.value() + loss.value())
}

/// An immutable, versioned model: θ, all user weights and learner states.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelVersion {
    pub schema: ModelSchema,
    pub params: Arc<FeatureParams>,
    pub weights: BTreeMap<u64, WeightVector>,
    pub learners: BTreeMap<u64, UserLearnerState>,
    pub version: u64,
    /// Last observation-log sequence number reflected in this version.
    pub log_seq: u64,
}

impl ModelVersion {
    /// An untrained version: θ only, no users.
    pub fn initial(schema: ModelSchema, params: FeatureParams) -> Result<Self> {
        let v = ModelVersion {
            schema,
            params: Arc::new(params),
            weights: BTreeMap::new(),
            learners: BTreeMap::new(),
            version: 0,
            log_seq: 0,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let d = self.schema.dimension;
        check_dim(d, self.params.dim())?;
        for w in self.weights.values() {
            check_dim(d, w.dim())?;
        }
        for s in self.learners.values() {
            check_dim(d, s.dim())?;
        }
        Ok(())
    }
}
