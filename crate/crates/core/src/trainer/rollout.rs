//! Episode collection.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{RewardModel, TrainError};
use crate::design::{ActionTable, StateId};
use crate::environment::{
    assign_rewards, episode_env_rng, EnvError, Entity, Environment, EpisodeConfig, Trajectory,
    Transition,
};
use crate::policy::{sample_action, value_estimate, ActingPolicy, PolicyError, ValueParams};

/// Fans episodes out over a fixed number of threads; one worker runs inline.
pub struct WorkerPool(Option<rayon::ThreadPool>);

impl WorkerPool {
    pub fn new(workers: usize) -> Result<Self, TrainError> {
        if workers <= 1 {
            return Ok(Self(None));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map(|p| Self(Some(p)))
            .map_err(|e| TrainError::InvalidConfig(format!("cannot start {workers} workers: {e}")))
    }

    pub fn sequential() -> Self {
        Self(None)
    }

    fn map<T: Send>(&self, count: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        match &self.0 {
            Some(pool) => pool.install(|| (0..count).into_par_iter().map(&f).collect()),
            None => (0..count).map(f).collect(),
        }
    }
}

/// Everything an episode needs besides the acting policy.
pub struct RolloutContext<'a> {
    pub env: &'a dyn Environment,
    /// Episode `e` starts from `anchors[e % anchors.len()]`.
    pub anchors: &'a [Entity],
    pub actions: &'a ActionTable,
    pub reward: &'a dyn RewardModel,
    pub episode: &'a EpisodeConfig,
    pub pool: &'a WorkerPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    /// Global index of each kept episode.
    pub episodes: Vec<u64>,
    pub dropped: usize,
}

impl RolloutBatch {
    pub fn mean_terminal_utility(&self) -> f64 {
        if self.trajectories.is_empty() {
            return f64::NAN;
        }
        self.trajectories.iter().map(|t| t.terminal_reward()).sum::<f64>() / self.trajectories.len() as f64
    }
}

/// Policy random stream for one episode.
pub fn episode_policy_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

enum EpisodeFailure {
    Env(EnvError),
    Fatal(TrainError),
}

impl From<PolicyError> for EpisodeFailure {
    fn from(e: PolicyError) -> Self {
        EpisodeFailure::Fatal(e.into())
    }
}

fn run_episode(
    agent: &dyn ActingPolicy,
    ctx: &RolloutContext<'_>,
    value: Option<&ValueParams>,
    seed: u64,
    episode: u64,
) -> Result<Trajectory, EpisodeFailure> {
    let anchor = &ctx.anchors[(episode % ctx.anchors.len() as u64) as usize];
    let actions = ctx
        .actions
        .get(&anchor.id)
        .ok_or(PolicyError::UnknownState(anchor.id))?;
    let horizon = ctx.episode.horizon;
    let mut policy_rng = episode_policy_rng(seed, episode);
    let mut env_rng = episode_env_rng(ctx.env.seed(), seed, episode);
    let mut state = anchor.clone();
    let mut transitions = Vec::with_capacity(horizon);
    let mut log_probs = Vec::with_capacity(horizon);
    let mut action_indices = Vec::with_capacity(horizon);
    let mut values = Vec::with_capacity(horizon + 1);
    for t in 0..horizon {
        values.push(match value {
            Some(v) => value_estimate(v, &state)?,
            None => 0.0,
        });
        let dist = agent.action_probs(&state, actions)?;
        let (idx, lp) = sample_action(&dist, &mut policy_rng);
        let action = &actions.candidates()[idx];
        let next = ctx
            .env
            .step(&state, action, &mut env_rng)
            .map_err(EpisodeFailure::Env)?;
        transitions.push(Transition {
            state: std::mem::replace(&mut state, next.clone()),
            action: action.clone(),
            next_state: next,
            reward: 0.0,
            step_index: t,
        });
        log_probs.push(lp);
        action_indices.push(idx);
    }
    values.push(0.0);
    let traj = Trajectory {
        transitions,
        log_probs,
        action_indices,
        values,
        return_: 0.0,
    };
    let anchor_id = anchor.id;
    let traj = assign_rewards(traj, horizon, ctx.episode.gamma, |terminal| {
        ctx.reward
            .terminal_utility(anchor_id, &terminal.embedding)
            .map_err(|e| EnvError::Reward(e.to_string()))
    })
    .map_err(EpisodeFailure::Env)?;
    debug_assert!(reward_shape_holds(&traj, ctx, anchor_id));
    Ok(traj)
}

fn reward_shape_holds(traj: &Trajectory, ctx: &RolloutContext<'_>, anchor: StateId) -> bool {
    let h = traj.horizon();
    let terminal = traj.terminal().expect("nonempty");
    let expected = ctx.reward.terminal_utility(anchor, &terminal.embedding).ok();
    traj.transitions[..h - 1].iter().all(|t| t.reward == 0.0)
        && expected == Some(traj.terminal_reward())
}

/// Rolls out episodes `first_episode .. first_episode + count`.
///
/// Each episode owns policy and environment streams keyed by its global
/// index, so the batch does not depend on the worker count. Episodes whose
/// environment fails are dropped and counted; policy errors abort the batch.
pub fn collect_rollouts(
    agent: &dyn ActingPolicy,
    ctx: &RolloutContext<'_>,
    value: Option<&ValueParams>,
    count: usize,
    seed: u64,
    first_episode: u64,
) -> Result<RolloutBatch, TrainError> {
    if count == 0 {
        return Err(TrainError::InvalidConfig("rollout count must be >= 1".into()));
    }
    if ctx.anchors.is_empty() {
        return Err(TrainError::InvalidConfig("no anchor states to start episodes from".into()));
    }
    ctx.episode.validate()?;
    let results = ctx.pool.map(count, |i| {
        let episode = first_episode + i as u64;
        (episode, run_episode(agent, ctx, value, seed, episode))
    });
    let mut batch = RolloutBatch {
        trajectories: Vec::with_capacity(count),
        episodes: Vec::with_capacity(count),
        dropped: 0,
    };
    for (episode, result) in results {
        match result {
            Ok(t) => {
                batch.trajectories.push(t);
                batch.episodes.push(episode);
            }
            Err(EpisodeFailure::Env(e)) => {
                log::warn!("episode {episode} dropped: {e}");
                batch.dropped += 1;
            }
            Err(EpisodeFailure::Fatal(e)) => return Err(e),
        }
    }
    Ok(batch)
}

/// Anchor entities keyed by id.
pub fn anchor_index(anchors: &[Entity]) -> BTreeMap<StateId, &Entity> {
    anchors.iter().map(|a| (a.id, a)).collect()
}
