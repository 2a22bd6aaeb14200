//! Linear-softmax policy over state-dependent action sets, a linear value
//! baseline, and per-state reference distributions.
//!
//! Scores are `phi(state, action) . w`, where `phi` concatenates the blocks
//! enabled in [`FeatureSpec`]. The policy is `softmax(scores / temperature)`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{
    optimistic_action, sample_g_optimal_design, state_seed, uniform_design, ActionCandidate,
    ActionSet, ActionTable, DesignConfig, DesignDistribution, DesignError, StateId,
};
use crate::embedding::EmbeddingVector;
use crate::environment::Entity;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("action set is empty")]
    EmptyActionSet,
    #[error("non-finite score for action index {0}")]
    NonFiniteScore(usize),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("temperature must be finite and > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("no reference distribution for state {0}")]
    UnknownState(StateId),
    #[error(transparent)]
    Design(#[from] DesignError),
}

/// Which blocks make up the score features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSpec {
    pub action_feature: bool,
    pub state_embedding: bool,
    /// Elementwise product of action feature and state embedding.
    pub product: bool,
    pub personalized: bool,
    pub bias: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            action_feature: true,
            state_embedding: true,
            product: true,
            personalized: true,
            bias: true,
        }
    }
}

impl FeatureSpec {
    /// Every block disabled.
    pub fn none() -> Self {
        Self {
            action_feature: false,
            state_embedding: false,
            product: false,
            personalized: false,
            bias: false,
        }
    }

    pub fn len(&self, n: usize) -> usize {
        let blocks = [self.action_feature, self.state_embedding, self.product];
        n * blocks.iter().filter(|b| **b).count()
            + usize::from(self.personalized)
            + usize::from(self.bias)
    }

    pub fn is_empty(&self, n: usize) -> bool {
        self.len(n) == 0
    }

    /// `phi(state, action)`.
    pub fn features(
        &self,
        state: &EmbeddingVector,
        action: &ActionCandidate,
    ) -> Result<Vec<f64>, PolicyError> {
        let z = action.feature()?;
        if z.dim() != state.dim() {
            return Err(PolicyError::DimensionMismatch {
                expected: state.dim(),
                actual: z.dim(),
            });
        }
        let mut phi = Vec::with_capacity(self.len(state.dim()));
        if self.action_feature {
            phi.extend_from_slice(z.as_slice());
        }
        if self.state_embedding {
            phi.extend_from_slice(state.as_slice());
        }
        if self.product {
            phi.extend(z.as_slice().iter().zip(state.as_slice()).map(|(a, s)| a * s));
        }
        if self.personalized {
            phi.push(if action.personalized { 1.0 } else { 0.0 });
        }
        if self.bias {
            phi.push(1.0);
        }
        Ok(phi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub spec: FeatureSpec,
    /// Latent dimension n of states and action features.
    pub dim: usize,
    pub weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(spec: FeatureSpec, dim: usize) -> Self {
        Self {
            spec,
            dim,
            weights: vec![0.0; spec.len(dim)],
        }
    }

    pub fn check(&self) -> Result<(), PolicyError> {
        let expected = self.spec.len(self.dim);
        if self.weights.len() != expected {
            return Err(PolicyError::DimensionMismatch {
                expected,
                actual: self.weights.len(),
            });
        }
        if let Some(i) = self.weights.iter().position(|w| !w.is_finite()) {
            return Err(PolicyError::NonFiniteScore(i));
        }
        Ok(())
    }
}

/// Features, scores and probabilities of one state's action set.
#[derive(Debug, Clone)]
pub struct StatePolicy {
    pub features: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub temperature: f64,
}

impl StatePolicy {
    pub fn evaluate(
        params: &PolicyParams,
        state: &Entity,
        actions: &ActionSet,
        temperature: f64,
    ) -> Result<Self, PolicyError> {
        if actions.is_empty() {
            return Err(PolicyError::EmptyActionSet);
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(PolicyError::InvalidTemperature(temperature));
        }
        if state.embedding.dim() != params.dim {
            return Err(PolicyError::DimensionMismatch {
                expected: params.dim,
                actual: state.embedding.dim(),
            });
        }
        let features = actions
            .candidates()
            .iter()
            .map(|a| params.spec.features(&state.embedding, a))
            .collect::<Result<Vec<_>, _>>()?;
        let scores: Vec<f64> = features.iter().map(|phi| dot(phi, &params.weights)).collect();
        let probs = softmax(&scores, temperature)?;
        Ok(Self {
            features,
            probs,
            temperature,
        })
    }

    /// Expected feature vector under the policy.
    pub fn mean_feature(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.features[0].len()];
        for (phi, p) in self.features.iter().zip(&self.probs) {
            for (m, f) in mean.iter_mut().zip(phi) {
                *m += p * f;
            }
        }
        mean
    }

    /// Gradient of `log pi(action index)` with respect to the weights:
    /// `(phi_i - E[phi]) / T`.
    pub fn log_prob_grad(&self, index: usize) -> Vec<f64> {
        let mean = self.mean_feature();
        self.features[index]
            .iter()
            .zip(&mean)
            .map(|(f, m)| (f - m) / self.temperature)
            .collect()
    }

    /// `KL(pi || reference)` and its gradient with respect to the weights.
    pub fn kl_and_grad(&self, reference: &[f64]) -> (f64, Vec<f64>) {
        let kl = kl_divergence(&self.probs, reference);
        let mut grad = vec![0.0; self.features[0].len()];
        // d KL / d s_j = p_j (log p_j - log r_j - KL) / T
        for ((phi, &p), &r) in self.features.iter().zip(&self.probs).zip(reference) {
            if p == 0.0 {
                continue;
            }
            let coef = p * ((p / r).ln() - kl) / self.temperature;
            for (g, f) in grad.iter_mut().zip(phi) {
                *g += coef * f;
            }
        }
        (kl, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable `softmax(scores / temperature)`.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>, PolicyError> {
    if scores.is_empty() {
        return Err(PolicyError::EmptyActionSet);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(PolicyError::NonFiniteScore(i));
    }
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - top) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Action probabilities for `state` over `actions`.
pub fn action_distribution(
    params: &PolicyParams,
    state: &Entity,
    actions: &ActionSet,
    temperature: f64,
) -> Result<Vec<f64>, PolicyError> {
    Ok(StatePolicy::evaluate(params, state, actions, temperature)?.probs)
}

/// Draws an index from `dist`, returning it with its log-probability.
pub fn sample_action(dist: &[f64], rng: &mut impl Rng) -> (usize, f64) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc && p > 0.0 {
            return (i, p.ln());
        }
    }
    (last_positive, dist[last_positive].ln())
}

/// `sum_i p_i log(p_i / r_i)`, with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], r: &[f64]) -> f64 {
    p.iter()
        .zip(r)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, r)| p * (p / r).ln())
        .sum::<f64>()
        .max(0.0)
}

/// `KL(dist || reference)`, with the reference smoothed by `epsilon` on
/// actions it gives zero mass.
pub fn kl_to_reference(
    dist: &[f64],
    reference: &DesignDistribution,
    actions: &ActionSet,
    epsilon: f64,
) -> Result<f64, PolicyError> {
    if dist.len() != actions.len() {
        return Err(PolicyError::DimensionMismatch {
            expected: actions.len(),
            actual: dist.len(),
        });
    }
    let r = reference.dense_over(actions, epsilon)?;
    Ok(kl_divergence(dist, &r))
}

/// Linear state-value baseline, `v . [embedding; 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueParams {
    pub weights: Vec<f64>,
}

impl ValueParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim + 1],
        }
    }
}

pub fn value_estimate(params: &ValueParams, state: &Entity) -> Result<f64, PolicyError> {
    let z = state.embedding.as_slice();
    if params.weights.len() != z.len() + 1 {
        return Err(PolicyError::DimensionMismatch {
            expected: z.len() + 1,
            actual: params.weights.len(),
        });
    }
    Ok(dot(&params.weights[..z.len()], z) + params.weights[z.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Uniform,
    Optimistic,
    GOptimal,
}

impl ReferenceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReferenceKind::Uniform => "uniform",
            ReferenceKind::Optimistic => "optimistic",
            ReferenceKind::GOptimal => "g_optimal",
        }
    }
}

impl std::str::FromStr for ReferenceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "optimistic" => Ok(Self::Optimistic),
            "g_optimal" => Ok(Self::GOptimal),
            other => Err(format!("unknown reference kind {other:?}")),
        }
    }
}

/// Per-state reference distributions of one kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePolicy {
    pub kind: ReferenceKind,
    pub table: BTreeMap<StateId, DesignDistribution>,
}

impl ReferencePolicy {
    pub fn uniform(actions: &ActionTable) -> Result<Self, PolicyError> {
        let table = actions
            .iter()
            .map(|(&s, set)| Ok((s, uniform_design(set)?)))
            .collect::<Result<_, DesignError>>()?;
        Ok(Self {
            kind: ReferenceKind::Uniform,
            table,
        })
    }

    /// Point mass per state on the action with the best expected next-step
    /// utility, as scored by `evaluate(state, action)`.
    pub fn optimistic<F, E>(actions: &ActionTable, mut evaluate: F) -> Result<Self, E>
    where
        F: FnMut(StateId, &ActionCandidate) -> Result<f64, E>,
        E: From<DesignError>,
    {
        let mut table = BTreeMap::new();
        for (&s, set) in actions {
            table.insert(s, optimistic_action(set, |a| evaluate(s, a))?);
        }
        Ok(Self {
            kind: ReferenceKind::Optimistic,
            table,
        })
    }

    /// Sampled approximate G-optimal design per state; each state uses its
    /// own seed derived from `cfg.seed`.
    pub fn g_optimal(actions: &ActionTable, cfg: &DesignConfig) -> Result<Self, PolicyError> {
        let mut table = BTreeMap::new();
        for (&s, set) in actions {
            let per_state = DesignConfig {
                seed: state_seed(cfg.seed, s),
                ..cfg.clone()
            };
            table.insert(s, sample_g_optimal_design(set, &per_state)?.design);
        }
        Ok(Self {
            kind: ReferenceKind::GOptimal,
            table,
        })
    }

    pub fn distribution(&self, state: StateId) -> Result<&DesignDistribution, PolicyError> {
        self.table.get(&state).ok_or(PolicyError::UnknownState(state))
    }
}

pub fn reference_distribution(
    reference: &ReferencePolicy,
    state: StateId,
) -> Result<&DesignDistribution, PolicyError> {
    reference.distribution(state)
}

/// Anything that maps a state and its action set to action probabilities.
pub trait ActingPolicy: Sync {
    fn action_probs(&self, state: &Entity, actions: &ActionSet) -> Result<Vec<f64>, PolicyError>;
}

/// The trained softmax policy at a fixed temperature.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxAgent<'a> {
    pub params: &'a PolicyParams,
    pub temperature: f64,
}

impl ActingPolicy for SoftmaxAgent<'_> {
    fn action_probs(&self, state: &Entity, actions: &ActionSet) -> Result<Vec<f64>, PolicyError> {
        action_distribution(self.params, state, actions, self.temperature)
    }
}

/// Acts with the stored distribution of the episode's anchor state.
impl ActingPolicy for ReferencePolicy {
    fn action_probs(&self, _state: &Entity, actions: &ActionSet) -> Result<Vec<f64>, PolicyError> {
        Ok(self.distribution(actions.state_id)?.dense_over(actions, 0.0)?)
    }
}
