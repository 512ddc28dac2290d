//! Per-user online ridge regression.
//!
//! Each user keeps `A⁻¹ = (FᵀF + λI)⁻¹` and `b = FᵀY`. A new observation is
//! folded in with a Sherman-Morrison rank-one update, so absorbing a label and
//! re-solving `w = A⁻¹b` both cost O(d²) and no matrix is ever inverted.

use crate::error::{check_dim, check_finite, Error, Result};
use crate::model::{dot, WeightVector};

#[derive(Clone, Debug, PartialEq)]
pub struct UserLearnerState {
    dim: usize,
    lambda: f64,
    /// Row-major `dim × dim`, kept exactly symmetric.
    a_inv: Vec<f64>,
    b: Vec<f64>,
    count: u64,
}

impl UserLearnerState {
    /// Fresh state: `A⁻¹ = I/λ`, `b = 0`.
    pub fn new(dim: usize, lambda: f64) -> Self {
        assert!(dim > 0, "learner dimension must be positive");
        assert!(lambda > 0.0 && lambda.is_finite(), "lambda must be positive");
        let mut a_inv = vec![0.0; dim * dim];
        for i in 0..dim {
            a_inv[i * dim + i] = 1.0 / lambda;
        }
        UserLearnerState {
            dim,
            lambda,
            a_inv,
            b: vec![0.0; dim],
            count: 0,
        }
    }

    /// Reassemble a state from stored parts (snapshot decoding).
    pub fn from_parts(dim: usize, lambda: f64, a_inv: Vec<f64>, b: Vec<f64>, count: u64) -> Result<Self> {
        check_dim(dim * dim, a_inv.len())?;
        check_dim(dim, b.len())?;
        check_finite(&a_inv, "inverse gram matrix")?;
        check_finite(&b, "response vector")?;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
        }
        Ok(UserLearnerState {
            dim,
            lambda,
            a_inv,
            b,
            count,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn a_inv(&self) -> &[f64] {
        &self.a_inv
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    fn check_input(&self, f: &[f64], y: f64) -> Result<()> {
        check_dim(self.dim, f.len())?;
        check_finite(f, "feature vector")?;
        if !y.is_finite() {
            return Err(Error::NonFinite("label"));
        }
        Ok(())
    }

    fn mul_a_inv(&self, v: &[f64], out: &mut [f64]) {
        for (row, o) in self.a_inv.chunks_exact(self.dim).zip(out.iter_mut()) {
            *o = dot(row, v);
        }
    }

    /// Fold `(f, y)` into the state.
    pub fn absorb(&mut self, f: &[f64], y: f64) -> Result<()> {
        self.check_input(f, y)?;
        self.absorb_unchecked(f, y);
        Ok(())
    }

    /// Consuming form of [`UserLearnerState::absorb`].
    pub fn absorbed(mut self, f: &[f64], y: f64) -> Result<Self> {
        self.absorb(f, y)?;
        Ok(self)
    }

    fn absorb_unchecked(&mut self, f: &[f64], y: f64) {
        let d = self.dim;
        let mut u = vec![0.0; d];
        self.mul_a_inv(f, &mut u);
        let denom = 1.0 + dot(f, &u);
        // A⁻¹ ← A⁻¹ − (A⁻¹f)(A⁻¹f)ᵀ / (1 + fᵀA⁻¹f), re-symmetrized as (A+Aᵀ)/2.
        for i in 0..d {
            let ui = u[i] / denom;
            for j in i..d {
                let sym = 0.5 * (self.a_inv[i * d + j] + self.a_inv[j * d + i]);
                let v = sym - ui * u[j];
                self.a_inv[i * d + j] = v;
                self.a_inv[j * d + i] = v;
            }
        }
        for (bi, fi) in self.b.iter_mut().zip(f) {
            *bi += y * fi;
        }
        self.count += 1;
    }

    /// Ridge solution `w = A⁻¹b`; zero when nothing has been absorbed.
    pub fn solve_weights(&self) -> WeightVector {
        let mut w = vec![0.0; self.dim];
        self.mul_a_inv(&self.b, &mut w);
        WeightVector::from_vec_unchecked(w)
    }

    /// `fᵀA⁻¹f`, the posterior variance proxy used for exploration bonuses.
    pub fn quadratic_form(&self, f: &[f64]) -> Result<f64> {
        check_dim(self.dim, f.len())?;
        let mut u = vec![0.0; self.dim];
        self.mul_a_inv(f, &mut u);
        Ok(dot(f, &u).max(0.0))
    }

    /// Prequential step: score `(y, f)` against the current weights, then
    /// absorb it. Returns the squared held-out error.
    pub fn cross_validate_update(&mut self, f: &[f64], y: f64) -> Result<f64> {
        self.check_input(f, y)?;
        let prediction = dot(self.solve_weights().as_slice(), f);
        self.absorb_unchecked(f, y);
        let err = y - prediction;
        Ok(err * err)
    }

    /// Serving-side step: score `(y, f)` against the weights currently
    /// served (which may come from offline training rather than this state),
    /// absorb it, and replace the served weights with the new ridge solution.
    pub fn online_step(&mut self, served: &mut WeightVector, f: &[f64], y: f64) -> Result<f64> {
        self.check_input(f, y)?;
        check_dim(self.dim, served.dim())?;
        let err = y - dot(served.as_slice(), f);
        self.absorb_unchecked(f, y);
        *served = self.solve_weights();
        Ok(err * err)
    }
}

/// Mean of the supplied user weights; zero vector of length `dim` when empty.
pub fn bootstrap_weights<'a, I>(users: I, dim: usize) -> Result<WeightVector>
where
    I: IntoIterator<Item = &'a WeightVector>,
{
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for w in users {
        check_dim(dim, w.dim())?;
        for (s, v) in sum.iter_mut().zip(w.as_slice()) {
            *s += v;
        }
        n += 1;
    }
    if n > 0 {
        let inv = 1.0 / n as f64;
        sum.iter_mut().for_each(|s| *s *= inv);
    }
    WeightVector::new(sum)
}
