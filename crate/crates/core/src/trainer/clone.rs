//! Behavior cloning of a reference policy into softmax parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::design::ActionTable;
use crate::environment::Entity;
use crate::policy::{
    kl_divergence, softmax, FeatureSpec, PolicyError, PolicyParams, ReferencePolicy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloneConfig {
    pub steps: usize,
    /// States per gradient step; the full set is used when it is smaller.
    pub batch_size: usize,
    pub lr: f64,
    /// Std of Gaussian noise added to scores during fitting. Not equivalent
    /// to dropout; 0 disables it.
    pub score_noise: f64,
    pub seed: u64,
    /// Steps between recorded cross-entropy values.
    pub record_interval: usize,
}

impl Default for CloneConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 1024,
            lr: 2e-6,
            score_noise: 0.0,
            seed: 0,
            record_interval: 1000,
        }
    }
}

impl CloneConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.steps == 0 {
            return bad("clone steps must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("clone batch_size must be >= 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("clone lr must be finite and > 0");
        }
        if !(self.score_noise.is_finite() && self.score_noise >= 0.0) {
            return bad("score_noise must be finite and >= 0");
        }
        if self.record_interval == 0 {
            return bad("record_interval must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloneFit {
    pub params: PolicyParams,
    /// `(step, mean cross-entropy)` at step 0, every record interval, and the end.
    pub ce_history: Vec<(usize, f64)>,
    /// Mean `KL(target || fitted)` over states after fitting.
    pub mean_kl: f64,
}

struct CloneExample {
    features: Vec<Vec<f64>>,
    target: Vec<f64>,
}

fn scores(ex: &CloneExample, w: &[f64]) -> Vec<f64> {
    ex.features
        .iter()
        .map(|phi| phi.iter().zip(w).map(|(f, w)| f * w).sum())
        .collect()
}

fn cross_entropy(target: &[f64], probs: &[f64]) -> f64 {
    -target
        .iter()
        .zip(probs)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, p)| q * p.ln())
        .sum::<f64>()
}

fn mean_metrics(examples: &[CloneExample], w: &[f64], temperature: f64) -> Result<(f64, f64), PolicyError> {
    let mut ce = 0.0;
    let mut kl = 0.0;
    for ex in examples {
        let p = softmax(&scores(ex, w), temperature)?;
        ce += cross_entropy(&ex.target, &p);
        kl += kl_divergence(&ex.target, &p);
    }
    let n = examples.len() as f64;
    Ok((ce / n, kl / n))
}

/// Fits softmax parameters to the reference's per-state distributions by
/// gradient descent on mean cross-entropy, starting from zero weights.
pub fn fit_reference_policy(
    reference: &ReferencePolicy,
    anchors: &[Entity],
    actions: &ActionTable,
    spec: FeatureSpec,
    temperature: f64,
    cfg: &CloneConfig,
) -> Result<CloneFit, TrainError> {
    cfg.validate()?;
    if reference.table.is_empty() {
        return Err(TrainError::InvalidConfig("reference has no states to clone".into()));
    }
    let index = super::anchor_index(anchors);
    let mut dim = None;
    let mut examples = Vec::with_capacity(reference.table.len());
    for (&state, q) in &reference.table {
        let anchor = index.get(&state).ok_or(PolicyError::UnknownState(state))?;
        let set = actions.get(&state).ok_or(PolicyError::UnknownState(state))?;
        let n = anchor.embedding.dim();
        if *dim.get_or_insert(n) != n {
            return Err(PolicyError::DimensionMismatch {
                expected: dim.unwrap(),
                actual: n,
            }
            .into());
        }
        let features = set
            .candidates()
            .iter()
            .map(|a| spec.features(&anchor.embedding, a))
            .collect::<Result<Vec<_>, _>>()?;
        examples.push(CloneExample {
            features,
            target: q.dense_over(set, 0.0)?,
        });
    }
    let mut params = PolicyParams::zeros(spec, dim.expect("nonempty"));
    if params.weights.is_empty() {
        return Err(TrainError::InvalidConfig("feature spec selects no features".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let full_batch = examples.len() <= cfg.batch_size;
    let mut ce_history = vec![(0, mean_metrics(&examples, &params.weights, temperature)?.0)];
    let mut grad = vec![0.0; params.weights.len()];
    for step in 1..=cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let batch = if full_batch { examples.len() } else { cfg.batch_size };
        for b in 0..batch {
            let ex = if full_batch {
                &examples[b]
            } else {
                &examples[rng.random_range(0..examples.len())]
            };
            let mut s = scores(ex, &params.weights);
            if cfg.score_noise > 0.0 {
                for x in &mut s {
                    *x += cfg.score_noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let p = softmax(&s, temperature)?;
            // d CE / d w = sum_j (p_j - q_j) phi_j / T
            for ((phi, pj), qj) in ex.features.iter().zip(&p).zip(&ex.target) {
                let coef = (pj - qj) / (temperature * batch as f64);
                for (g, f) in grad.iter_mut().zip(phi) {
                    *g += coef * f;
                }
            }
        }
        for (w, g) in params.weights.iter_mut().zip(&grad) {
            *w -= cfg.lr * g;
        }
        if step % cfg.record_interval == 0 || step == cfg.steps {
            ce_history.push((step, mean_metrics(&examples, &params.weights, temperature)?.0));
        }
    }
    params.check()?;
    let mean_kl = mean_metrics(&examples, &params.weights, temperature)?.1;
    Ok(CloneFit {
        params,
        ce_history,
        mean_kl,
    })
}
