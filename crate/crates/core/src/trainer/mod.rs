//! Rollouts, advantage estimation, the KL-regularized REINFORCE update,
//! reference cloning and the end-to-end training loop.
//!
//! The loss minimized per step is
//! `-(1/B) sum_i sum_t A_it log pi(a_it | x_it) + alpha * mean_it KL(pi(.|x_it) || q(x_it))`,
//! with `q` smoothed by `kl_epsilon`. Updates are plain SGD.

mod clone;
mod rollout;

pub use clone::{fit_reference_policy, CloneConfig, CloneFit};
pub use rollout::{
    anchor_index, collect_rollouts, episode_policy_rng, RolloutBatch, RolloutContext, WorkerPool,
};

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{state_seed, ActionTable, DesignConfig, DesignError, StateId};
use crate::embedding::{EmbeddingCatalog, EmbeddingVector};
use crate::environment::{estimate_features, EnvError, Entity, Environment, EpisodeConfig, Trajectory};
use crate::policy::{
    FeatureSpec, PolicyError, PolicyParams, ReferenceKind, ReferencePolicy, SoftmaxAgent,
    StatePolicy, ValueParams,
};
use crate::utility::{content_gap_utility, Objective, UtilityConfig, UtilityError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("trajectory has {actual} {what}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite advantage at episode {episode}, step {step}")]
    NonFiniteAdvantage { episode: usize, step: usize },
    #[error("every episode of the batch at step {step} was dropped")]
    AllEpisodesDropped { step: usize },
    #[error("training aborted at step {step}: {source}")]
    Aborted {
        step: usize,
        policy: Box<PolicyParams>,
        value: Box<ValueParams>,
        source: Box<TrainError>,
    },
}

/// Terminal utility of an episode that started from `anchor`.
pub trait RewardModel: Send + Sync {
    fn terminal_utility(&self, anchor: StateId, z: &EmbeddingVector) -> Result<f64, UtilityError>;
}

/// The same objective for every anchor.
pub struct ObjectiveReward<O>(pub O);

impl<O: Objective> RewardModel for ObjectiveReward<O> {
    fn terminal_utility(&self, _anchor: StateId, z: &EmbeddingVector) -> Result<f64, UtilityError> {
        self.0.utility(z)
    }
}

/// Content-gap utility for one user, with the episode's anchor left out of
/// the neighbor search.
pub struct ContentGapReward {
    pub user: EmbeddingVector,
    pub catalog: Arc<EmbeddingCatalog>,
    pub cfg: UtilityConfig,
}

impl RewardModel for ContentGapReward {
    fn terminal_utility(&self, anchor: StateId, z: &EmbeddingVector) -> Result<f64, UtilityError> {
        content_gap_utility(z, &self.user, &self.catalog, &self.cfg, &BTreeSet::from([anchor]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub training_steps: usize,
    /// KL coefficient.
    pub alpha: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub gae_lambda: f64,
    pub batch_episodes: usize,
    pub seed: u64,
    /// Steps per metrics row.
    pub eval_interval: usize,
    pub workers: usize,
    /// Mass given to zero-probability reference actions inside the KL.
    pub kl_epsilon: f64,
    pub features: FeatureSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            training_steps: 30_000,
            alpha: 0.1,
            policy_lr: 1e-5,
            value_lr: 5e-6,
            gae_lambda: 0.95,
            batch_episodes: 32,
            seed: 0,
            eval_interval: 1000,
            workers: 16,
            kl_epsilon: 1e-6,
            features: FeatureSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be finite and >= 0");
        }
        if !(self.policy_lr.is_finite() && self.policy_lr > 0.0 && self.value_lr.is_finite() && self.value_lr > 0.0) {
            return bad("learning rates must be finite and > 0");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if self.batch_episodes == 0 || self.eval_interval == 0 {
            return bad("batch_episodes and eval_interval must be >= 1");
        }
        if !(self.kl_epsilon > 0.0 && self.kl_epsilon < 1.0) {
            return bad("kl_epsilon must lie in (0, 1)");
        }
        Ok(())
    }
}

fn check_lengths(traj: &Trajectory) -> Result<usize, TrainError> {
    let h = traj.horizon();
    let checks = [
        ("log-probs", h, traj.log_probs.len()),
        ("action indices", h, traj.action_indices.len()),
        ("value slots", h + 1, traj.values.len()),
    ];
    for (what, expected, actual) in checks {
        if expected != actual {
            return Err(TrainError::LengthMismatch { what, expected, actual });
        }
    }
    Ok(h)
}

/// `A_t = sum_l (gamma lambda)^l delta_{t+l}` with
/// `delta_t = r_t + gamma V(s_{t+1}) - V(s_t)`.
pub fn compute_gae(traj: &Trajectory, gamma: f64, lambda: f64) -> Result<Vec<f64>, TrainError> {
    let h = check_lengths(traj)?;
    let v = &traj.values;
    let mut adv = vec![0.0; h];
    let mut acc = 0.0;
    for t in (0..h).rev() {
        let delta = traj.transitions[t].reward + gamma * v[t + 1] - v[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

/// Discounted reward-to-go from each step.
pub fn returns_to_go(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; traj.horizon()];
    let mut acc = 0.0;
    for t in (0..traj.horizon()).rev() {
        acc = traj.transitions[t].reward + gamma * acc;
        out[t] = acc;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub pg_loss: f64,
    pub mean_kl: f64,
    pub grad: Vec<f64>,
}

/// Loss of `params` on a batch with fixed advantages, and its gradient.
/// Log-probabilities are recomputed under `params`.
pub fn reinforce_loss(
    batch: &[Trajectory],
    advantages: &[Vec<f64>],
    params: &PolicyParams,
    reference: &ReferencePolicy,
    actions: &ActionTable,
    temperature: f64,
    cfg: &TrainConfig,
) -> Result<LossOutput, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::InvalidConfig("empty trajectory batch".into()));
    }
    if advantages.len() != batch.len() {
        return Err(TrainError::LengthMismatch {
            what: "advantage rows",
            expected: batch.len(),
            actual: advantages.len(),
        });
    }
    params.check()?;
    let b = batch.len() as f64;
    let visits: usize = batch.iter().map(|t| t.horizon()).sum();
    let mut pg_loss = 0.0;
    let mut kl_sum = 0.0;
    let mut grad = vec![0.0; params.weights.len()];
    let mut cached_state = None;
    let mut cached_ref = Vec::new();
    for (i, (traj, adv)) in batch.iter().zip(advantages).enumerate() {
        let h = check_lengths(traj)?;
        if adv.len() != h {
            return Err(TrainError::LengthMismatch {
                what: "advantages",
                expected: h,
                actual: adv.len(),
            });
        }
        for (t, tr) in traj.transitions.iter().enumerate() {
            let a = adv[t];
            if !a.is_finite() {
                return Err(TrainError::NonFiniteAdvantage { episode: i, step: t });
            }
            let set = actions
                .get(&tr.state.id)
                .ok_or(PolicyError::UnknownState(tr.state.id))?;
            if cached_state != Some(tr.state.id) {
                cached_ref = reference
                    .distribution(tr.state.id)?
                    .dense_over(set, cfg.kl_epsilon)?;
                cached_state = Some(tr.state.id);
            }
            let sp = StatePolicy::evaluate(params, &tr.state, set, temperature)?;
            let idx = traj.action_indices[t];
            pg_loss -= a * sp.probs[idx].ln() / b;
            let glp = sp.log_prob_grad(idx);
            let (kl, gkl) = sp.kl_and_grad(&cached_ref);
            kl_sum += kl;
            let kl_coef = cfg.alpha / visits as f64;
            for ((g, lp), k) in grad.iter_mut().zip(&glp).zip(&gkl) {
                *g += -a * lp / b + kl_coef * k;
            }
        }
    }
    let mean_kl = kl_sum / visits as f64;
    Ok(LossOutput {
        loss: pg_loss + cfg.alpha * mean_kl,
        pg_loss,
        mean_kl,
        grad,
    })
}

/// One SGD step of `0.5 * mean (V(s_t) - G_t)^2` toward Monte Carlo returns.
/// Returns the pre-update loss.
pub fn value_update(value: &mut ValueParams, batch: &[Trajectory], gamma: f64, lr: f64) -> Result<f64, TrainError> {
    let mut grad = vec![0.0; value.weights.len()];
    let mut loss = 0.0;
    let mut count = 0usize;
    for traj in batch {
        for (tr, g) in traj.transitions.iter().zip(returns_to_go(traj, gamma)) {
            let z = tr.state.embedding.as_slice();
            let err = crate::policy::value_estimate(value, &tr.state)? - g;
            loss += 0.5 * err * err;
            for (gw, x) in grad.iter_mut().zip(z.iter().chain(std::iter::once(&1.0))) {
                *gw += err * x;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    for (w, g) in value.weights.iter_mut().zip(&grad) {
        *w -= lr * g / count as f64;
    }
    Ok(loss / count as f64)
}

/// Metrics averaged over one `eval_interval` window of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Steps completed at the end of the window.
    pub step: usize,
    pub mean_terminal_utility: f64,
    pub mean_kl: f64,
    pub loss: f64,
    pub value_loss: f64,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub policy: PolicyParams,
    pub value: ValueParams,
    pub history: Vec<MetricsRow>,
    pub dropped: usize,
}

#[derive(Default)]
struct Window {
    steps: usize,
    utility: f64,
    kl: f64,
    loss: f64,
    value_loss: f64,
    dropped: usize,
}

/// Policy-gradient training from `init` against `reference`.
///
/// Step `s` rolls out episodes `s * B .. (s + 1) * B`; the run is a pure
/// function of its inputs and `cfg.seed`. On failure the parameters reached
/// so far are returned inside [`TrainError::Aborted`].
pub fn policy_gradient(
    ctx: &RolloutContext<'_>,
    reference: &ReferencePolicy,
    init: PolicyParams,
    init_value: ValueParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    ctx.episode.validate()?;
    let mut policy = init;
    let mut value = init_value;
    let mut history = Vec::with_capacity(cfg.training_steps / cfg.eval_interval);
    let mut window = Window::default();
    let mut dropped = 0;
    let temperature = ctx.episode.agent_temperature;
    for step in 0..cfg.training_steps {
        let result = train_step(ctx, reference, &mut policy, &mut value, cfg, step, temperature);
        let (batch, loss, value_loss) = match result {
            Ok(r) => r,
            Err(source) => {
                return Err(TrainError::Aborted {
                    step,
                    policy: Box::new(policy),
                    value: Box::new(value),
                    source: Box::new(source),
                })
            }
        };
        dropped += batch.dropped;
        window.steps += 1;
        window.utility += batch.mean_terminal_utility();
        window.kl += loss.mean_kl;
        window.loss += loss.loss;
        window.value_loss += value_loss;
        window.dropped += batch.dropped;
        if (step + 1) % cfg.eval_interval == 0 {
            let n = window.steps as f64;
            let row = MetricsRow {
                step: step + 1,
                mean_terminal_utility: window.utility / n,
                mean_kl: window.kl / n,
                loss: window.loss / n,
                value_loss: window.value_loss / n,
                dropped: window.dropped,
            };
            log::info!(
                "step {}: utility {:.4}, kl {:.4}, loss {:.4}",
                row.step,
                row.mean_terminal_utility,
                row.mean_kl,
                row.loss
            );
            history.push(row);
            window = Window::default();
        }
    }
    Ok(TrainOutcome {
        policy,
        value,
        history,
        dropped,
    })
}

fn train_step(
    ctx: &RolloutContext<'_>,
    reference: &ReferencePolicy,
    policy: &mut PolicyParams,
    value: &mut ValueParams,
    cfg: &TrainConfig,
    step: usize,
    temperature: f64,
) -> Result<(RolloutBatch, LossOutput, f64), TrainError> {
    let agent = SoftmaxAgent {
        params: policy,
        temperature,
    };
    let first = (step * cfg.batch_episodes) as u64;
    let batch = collect_rollouts(&agent, ctx, Some(value), cfg.batch_episodes, cfg.seed, first)?;
    if batch.trajectories.is_empty() {
        return Err(TrainError::AllEpisodesDropped { step });
    }
    let advantages = batch
        .trajectories
        .iter()
        .map(|t| compute_gae(t, ctx.episode.gamma, cfg.gae_lambda))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = reinforce_loss(
        &batch.trajectories,
        &advantages,
        policy,
        reference,
        ctx.actions,
        temperature,
        cfg,
    )?;
    for (w, g) in policy.weights.iter_mut().zip(&loss.grad) {
        *w -= cfg.policy_lr * g;
    }
    policy.check()?;
    let value_loss = value_update(value, &batch.trajectories, ctx.episode.gamma, cfg.value_lr)?;
    Ok((batch, loss, value_loss))
}

/// Fills missing candidate features with mean next-state embeddings from
/// each anchor. Returns the number of features estimated.
pub fn prepare_action_features(
    actions: &mut ActionTable,
    anchors: &[Entity],
    env: &dyn Environment,
    design: &DesignConfig,
) -> Result<usize, TrainError> {
    let index = anchor_index(anchors);
    let mut estimated = 0;
    for (&state, set) in actions.iter_mut() {
        if set.candidates().iter().all(|c| c.feature.is_some()) {
            continue;
        }
        let anchor = index.get(&state).ok_or(PolicyError::UnknownState(state))?;
        let mut rng = ChaCha8Rng::seed_from_u64(state_seed(design.seed ^ env.seed(), state));
        estimated += estimate_features(set, anchor, env, design.feature_samples, &mut rng)?;
    }
    Ok(estimated)
}

/// Builds the per-state reference table of the requested kind.
pub fn build_reference(
    kind: ReferenceKind,
    actions: &ActionTable,
    reward: &dyn RewardModel,
    design: &DesignConfig,
) -> Result<ReferencePolicy, TrainError> {
    match kind {
        ReferenceKind::Uniform => Ok(ReferencePolicy::uniform(actions)?),
        ReferenceKind::GOptimal => Ok(ReferencePolicy::g_optimal(actions, design)?),
        ReferenceKind::Optimistic => ReferencePolicy::optimistic(actions, |state, a| -> Result<f64, TrainError> {
            Ok(reward.terminal_utility(state, a.feature()?)?)
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub design: DesignConfig,
    pub clone: CloneConfig,
    pub train: TrainConfig,
    pub episode: EpisodeConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub actions: ActionTable,
    pub reference: ReferencePolicy,
    pub clone: CloneFit,
    pub outcome: TrainOutcome,
}

/// The full loop: estimate missing action features, build reference
/// designs, clone the reference, then train by policy gradient starting
/// from the cloned parameters.
pub fn train(
    env: &dyn Environment,
    anchors: &[Entity],
    mut actions: ActionTable,
    kind: ReferenceKind,
    reward: &dyn RewardModel,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, TrainError> {
    cfg.train.validate()?;
    cfg.episode.validate()?;
    let estimated = prepare_action_features(&mut actions, anchors, env, &cfg.design)?;
    if estimated > 0 {
        log::info!("estimated {estimated} missing action features");
    }
    let reference = build_reference(kind, &actions, reward, &cfg.design)?;
    let clone = fit_reference_policy(
        &reference,
        anchors,
        &actions,
        cfg.train.features,
        cfg.episode.agent_temperature,
        &cfg.clone,
    )?;
    let dim = clone.params.dim;
    let pool = WorkerPool::new(cfg.train.workers)?;
    let ctx = RolloutContext {
        env,
        anchors,
        actions: &actions,
        reward,
        episode: &cfg.episode,
        pool: &pool,
    };
    let outcome = policy_gradient(&ctx, &reference, clone.params.clone(), ValueParams::zeros(dim), &cfg.train)?;
    Ok(PipelineOutcome {
        actions,
        reference,
        clone,
        outcome,
    })
}
