//! Per-state action sets and approximate G-optimal designs over their
//! next-state features.
//!
//! For a design `q` over actions with features `z_a`, the design covariance is
//! `Sigma(q) = sum_a q_a z_a z_a^T (+ ridge I)`. A design is accepted with
//! approximation factor `C` when every candidate in the set (not only the
//! support) satisfies `z_a^T Sigma(q)^+ z_a <= C n`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingVector, ItemId};

pub type ActionId = u64;
/// States are keyed by the id of the anchor entity they started from.
pub type StateId = ItemId;

/// Slack allowed when comparing a max norm against `C n`.
pub const ACCEPT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("action set is empty")]
    EmptyActionSet,
    #[error("duplicate action id {0} in set")]
    DuplicateAction(ActionId),
    #[error("unknown action id {0}")]
    UnknownAction(ActionId),
    #[error("action {0} has no estimated feature")]
    MissingFeature(ActionId),
    #[error("feature dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("covariance matrix is not symmetric")]
    NonSymmetric,
    #[error("invalid design distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid design configuration: {0}")]
    InvalidConfig(String),
    #[error("no accepted design after {attempts} attempts (best max norm {best_max_norm})")]
    DesignInfeasible { attempts: usize, best_max_norm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionCategory {
    Plot,
    Character,
    Visual,
    Thematic,
    Audience,
}

/// An action prompt together with its estimated next-state embedding.
///
/// `feature` is `None` until it has been estimated by rolling the action
/// through an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCandidate {
    pub id: ActionId,
    pub prompt_text: String,
    pub feature: Option<EmbeddingVector>,
    pub personalized: bool,
    pub category: ActionCategory,
}

impl ActionCandidate {
    pub fn new(id: ActionId, prompt_text: impl Into<String>, feature: EmbeddingVector) -> Self {
        Self {
            id,
            prompt_text: prompt_text.into(),
            feature: Some(feature),
            personalized: false,
            category: ActionCategory::Plot,
        }
    }

    pub fn feature(&self) -> Result<&EmbeddingVector, DesignError> {
        self.feature.as_ref().ok_or(DesignError::MissingFeature(self.id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    pub state_id: StateId,
    candidates: Vec<ActionCandidate>,
}

impl ActionSet {
    pub fn new(state_id: StateId, candidates: Vec<ActionCandidate>) -> Result<Self, DesignError> {
        if candidates.is_empty() {
            return Err(DesignError::EmptyActionSet);
        }
        let mut seen = BTreeSet::new();
        for c in &candidates {
            if !seen.insert(c.id) {
                return Err(DesignError::DuplicateAction(c.id));
            }
        }
        Ok(Self {
            state_id,
            candidates,
        })
    }

    pub fn candidates(&self) -> &[ActionCandidate] {
        &self.candidates
    }

    pub fn candidates_mut(&mut self) -> &mut [ActionCandidate] {
        &mut self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn get(&self, id: ActionId) -> Option<&ActionCandidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    pub fn position(&self, id: ActionId) -> Option<usize> {
        self.candidates.iter().position(|c| c.id == id)
    }

    /// Feature dimension, checked consistent across all candidates.
    pub fn feature_dim(&self) -> Result<usize, DesignError> {
        let n = self.candidates[0].feature()?.dim();
        for c in &self.candidates {
            let d = c.feature()?.dim();
            if d != n {
                return Err(DesignError::DimensionMismatch {
                    expected: n,
                    actual: d,
                });
            }
        }
        Ok(n)
    }

    /// Appends candidates (e.g. macro actions), keeping ids unique.
    pub fn extended(&self, extra: impl IntoIterator<Item = ActionCandidate>) -> Result<Self, DesignError> {
        let mut all = self.candidates.clone();
        all.extend(extra);
        Self::new(self.state_id, all)
    }
}

/// Action sets keyed by state.
pub type ActionTable = BTreeMap<StateId, ActionSet>;

/// Probability weights over a subset of an action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignDistribution {
    support: Vec<ActionId>,
    weights: Vec<f64>,
}

impl DesignDistribution {
    pub fn new(support: Vec<ActionId>, weights: Vec<f64>) -> Result<Self, DesignError> {
        if support.is_empty() {
            return Err(DesignError::InvalidDistribution("empty support".into()));
        }
        if support.len() != weights.len() {
            return Err(DesignError::InvalidDistribution(format!(
                "{} ids but {} weights",
                support.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(DesignError::InvalidDistribution(format!("weight {w} is not a probability")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(DesignError::InvalidDistribution(format!("weights sum to {total}")));
        }
        let unique: BTreeSet<_> = support.iter().collect();
        if unique.len() != support.len() {
            return Err(DesignError::InvalidDistribution("duplicate support id".into()));
        }
        Ok(Self { support, weights })
    }

    /// Uniform weights over `support`.
    pub fn uniform(support: Vec<ActionId>) -> Result<Self, DesignError> {
        let k = support.len();
        Self::new(support, vec![1.0 / k as f64; k])
    }

    pub fn point_mass(id: ActionId) -> Self {
        Self {
            support: vec![id],
            weights: vec![1.0],
        }
    }

    pub fn support(&self) -> &[ActionId] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight_of(&self, id: ActionId) -> f64 {
        self.support
            .iter()
            .position(|&s| s == id)
            .map_or(0.0, |i| self.weights[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ActionId, f64)> + '_ {
        self.support.iter().copied().zip(self.weights.iter().copied())
    }

    /// Dense weights aligned with `actions`, with `epsilon` mass given to each
    /// zero entry before renormalizing.
    pub fn dense_over(&self, actions: &ActionSet, epsilon: f64) -> Result<Vec<f64>, DesignError> {
        let mut dense = vec![0.0; actions.len()];
        for (id, w) in self.iter() {
            let i = actions.position(id).ok_or(DesignError::UnknownAction(id))?;
            dense[i] = w;
        }
        if epsilon > 0.0 {
            let zeros = dense.iter().filter(|w| **w == 0.0).count();
            if zeros > 0 {
                let total = 1.0 + epsilon * zeros as f64;
                for w in &mut dense {
                    if *w == 0.0 {
                        *w = epsilon;
                    }
                    *w /= total;
                }
            }
        }
        Ok(dense)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignConfig {
    /// Subset size drawn per attempt.
    pub k: usize,
    /// Approximation factor C (>= 1).
    pub approximation: f64,
    pub max_attempts: usize,
    /// Added to the covariance diagonal.
    pub ridge: f64,
    pub seed: u64,
    /// Environment samples averaged when estimating a missing feature.
    pub feature_samples: usize,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            k: 10,
            approximation: 1.0,
            max_attempts: 100,
            ridge: 1e-8,
            seed: 0,
            feature_samples: 1,
        }
    }
}

impl DesignConfig {
    pub fn validate(&self) -> Result<(), DesignError> {
        if self.k == 0 {
            return Err(DesignError::InvalidConfig("k must be >= 1".into()));
        }
        if self.approximation.is_nan() || self.approximation < 1.0 {
            return Err(DesignError::InvalidConfig("approximation factor must be >= 1".into()));
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(DesignError::InvalidConfig("ridge must be finite and >= 0".into()));
        }
        if self.max_attempts == 0 {
            return Err(DesignError::InvalidConfig("max_attempts must be >= 1".into()));
        }
        if self.feature_samples == 0 {
            return Err(DesignError::InvalidConfig("feature_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// `sum_a q_a z_a z_a^T + ridge I`.
pub fn design_covariance(
    q: &DesignDistribution,
    actions: &ActionSet,
    ridge: f64,
) -> Result<DMatrix<f64>, DesignError> {
    let n = actions.feature_dim()?;
    let mut sigma = DMatrix::<f64>::zeros(n, n);
    for (id, w) in q.iter() {
        let z = actions.get(id).ok_or(DesignError::UnknownAction(id))?.feature()?;
        let z = z.as_slice();
        for i in 0..n {
            for j in i..n {
                sigma[(i, j)] += w * z[i] * z[j];
            }
        }
    }
    for i in 0..n {
        sigma[(i, i)] += ridge;
        for j in 0..i {
            sigma[(i, j)] = sigma[(j, i)];
        }
    }
    Ok(sigma)
}

/// `z^T Sigma^+ z`, or `f64::INFINITY` when `z` leaves the range of `Sigma`.
pub fn design_norm(z: &EmbeddingVector, sigma: &DMatrix<f64>) -> Result<f64, DesignError> {
    DesignNormSolver::new(sigma)?.norm(z)
}

/// Pseudo-inverse of one covariance, reused across many norm queries.
pub struct DesignNormSolver {
    eigen: SymmetricEigen<f64, nalgebra::Dyn>,
    cutoff: f64,
}

impl DesignNormSolver {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self, DesignError> {
        let n = sigma.nrows();
        if sigma.ncols() != n {
            return Err(DesignError::NonSymmetric);
        }
        let scale = sigma.amax().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * scale {
                    return Err(DesignError::NonSymmetric);
                }
            }
        }
        let eigen = SymmetricEigen::new(sigma.clone());
        let top = eigen.eigenvalues.max().max(0.0);
        let cutoff = top * n as f64 * f64::EPSILON * 16.0;
        Ok(Self { eigen, cutoff })
    }

    pub fn rank(&self) -> usize {
        self.eigen.eigenvalues.iter().filter(|&&l| l > self.cutoff).count()
    }

    pub fn norm(&self, z: &EmbeddingVector) -> Result<f64, DesignError> {
        let n = self.eigen.eigenvalues.len();
        if z.dim() != n {
            return Err(DesignError::DimensionMismatch {
                expected: n,
                actual: z.dim(),
            });
        }
        let x = DVector::from_column_slice(z.as_slice());
        let coords = self.eigen.eigenvectors.transpose() * &x;
        let range_tol = 1e-8 * z.norm();
        let mut total = 0.0;
        for (c, &l) in coords.iter().zip(self.eigen.eigenvalues.iter()) {
            if l > self.cutoff {
                total += c * c / l;
            } else if c.abs() > range_tol {
                return Ok(f64::INFINITY);
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignCheck {
    pub max_norm: f64,
    pub accepted: bool,
}

/// Max design norm over the whole action set, compared against `C n`.
pub fn verify_design(
    q: &DesignDistribution,
    actions: &ActionSet,
    cfg: &DesignConfig,
) -> Result<DesignCheck, DesignError> {
    let n = actions.feature_dim()?;
    let solver = DesignNormSolver::new(&design_covariance(q, actions, cfg.ridge)?)?;
    let mut max_norm: f64 = 0.0;
    for c in actions.candidates() {
        max_norm = max_norm.max(solver.norm(c.feature()?)?);
    }
    let bound = cfg.approximation * n as f64;
    Ok(DesignCheck {
        max_norm,
        accepted: max_norm <= bound + ACCEPT_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledDesign {
    pub design: DesignDistribution,
    pub max_norm: f64,
    /// Subsets drawn, including the accepted one.
    pub attempts: usize,
}

/// Draws uniform `k`-subsets until the uniform design on one is accepted.
pub fn sample_g_optimal_design(
    actions: &ActionSet,
    cfg: &DesignConfig,
) -> Result<SampledDesign, DesignError> {
    cfg.validate()?;
    let total = actions.len();
    if cfg.k > total {
        return Err(DesignError::InvalidConfig(format!(
            "subset size {} exceeds action set size {total}",
            cfg.k
        )));
    }
    actions.feature_dim()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = f64::INFINITY;
    for attempt in 1..=cfg.max_attempts {
        let mut picked = sample(&mut rng, total, cfg.k).into_vec();
        picked.sort_unstable();
        let support = picked
            .into_iter()
            .map(|i| actions.candidates()[i].id)
            .collect();
        let design = DesignDistribution::uniform(support)?;
        let check = verify_design(&design, actions, cfg)?;
        if check.accepted {
            return Ok(SampledDesign {
                design,
                max_norm: check.max_norm,
                attempts: attempt,
            });
        }
        best = best.min(check.max_norm);
    }
    Err(DesignError::DesignInfeasible {
        attempts: cfg.max_attempts,
        best_max_norm: best,
    })
}

pub fn uniform_design(actions: &ActionSet) -> Result<DesignDistribution, DesignError> {
    if actions.is_empty() {
        return Err(DesignError::EmptyActionSet);
    }
    DesignDistribution::uniform(actions.candidates().iter().map(|c| c.id).collect())
}

/// Point mass on the candidate with the largest expected next-step utility;
/// ties go to the smaller action id.
pub fn optimistic_action<F, E>(actions: &ActionSet, mut evaluate: F) -> Result<DesignDistribution, E>
where
    F: FnMut(&ActionCandidate) -> Result<f64, E>,
    E: From<DesignError>,
{
    if actions.is_empty() {
        return Err(DesignError::EmptyActionSet.into());
    }
    let mut best: Option<(f64, ActionId)> = None;
    for c in actions.candidates() {
        let u = evaluate(c)?;
        best = match best {
            Some((bu, bid)) if bu > u || (bu == u && bid < c.id) => Some((bu, bid)),
            _ => Some((u, c.id)),
        };
    }
    Ok(DesignDistribution::point_mass(best.unwrap().1))
}

/// Per-state seed derived from a base seed, so designs across a table are
/// independent yet reproducible.
pub fn state_seed(base: u64, state: StateId) -> u64 {
    base ^ state.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
