//! The episodic MDP: entities as states, action prompts as actions, and
//! pluggable transition functions (an embedding-space simulator or an
//! external completion service).
//!
//! Rewards are terminal only: every step before the last pays 0 and the last
//! step pays the utility of the final entity's embedding.

mod encoder;
mod llm;
mod macros;
mod prompt;
mod sim;

pub use encoder::{EncodeError, Encoder, HashingEncoder, LookupEncoder, ServiceEncoder};
pub use llm::{
    llm_step, CompletionClient, CompletionRequest, CompletionResponse, HttpCompletionClient, HttpSettings,
    LlmEnvironment, LlmStepConfig, RecordingClient, ReplayClient, RetryPolicy, ServiceError,
    TranscriptEntry,
};
pub use macros::{combined_action_space, make_macro_action, MacroSemantics};
pub use prompt::{
    parse_delimited, render_env_prompt, Description, ParseError, ENV_PROMPT_TEMPLATE,
};
pub use sim::{sim_step, SimDynamicsConfig, SimEnvironment};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{ActionCandidate, ActionId, ActionSet, DesignError};
use crate::embedding::{EmbeddingError, EmbeddingVector, ItemId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action {0} is not known to the environment")]
    UnknownAction(ActionId),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("could not parse environment response ({error}); raw response: {raw:?}")]
    Parse { error: ParseError, raw: String },
    #[error("state text is missing a delimited segment: {0}")]
    MissingSegment(ParseError),
    #[error("action text is empty")]
    EmptyAction,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("trajectory has {actual} transitions, expected {expected}")]
    TrajectoryLength { expected: usize, actual: usize },
    #[error("macro action needs {expected} parts, got {actual}")]
    MacroSize { expected: usize, actual: usize },
    #[error("reward evaluation failed: {0}")]
    Reward(String),
    #[error("invalid episode configuration: {0}")]
    InvalidConfig(String),
}

impl EnvError {
    /// Whether retrying the same request may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            EnvError::Service(e) => e.transient,
            EnvError::Encode(EncodeError::Service(e)) => e.transient,
            _ => false,
        }
    }
}

/// A state of the MDP: an entity's text and its embedding under the active
/// encoder. The id stays the anchor entity's id along a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: ItemId,
    pub text: String,
    pub embedding: EmbeddingVector,
}

impl Entity {
    /// Builds an entity by encoding its text.
    pub fn encoded(id: ItemId, text: impl Into<String>, encoder: &dyn Encoder) -> Result<Self, EncodeError> {
        let text = text.into();
        let embedding = encoder.encode(&text)?;
        Ok(Self { id, text, embedding })
    }

    /// Builds an entity from an embedding already produced by an encoder
    /// (or by the simulator's dynamics).
    pub fn with_embedding(id: ItemId, text: impl Into<String>, embedding: EmbeddingVector) -> Self {
        Self {
            id,
            text: text.into(),
            embedding,
        }
    }

    /// An anchor whose text is the simulator's synthetic label.
    pub fn anchor(id: ItemId, embedding: EmbeddingVector) -> Self {
        Self::with_embedding(id, format!("anchor#{id}"), embedding)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub agent_temperature: f64,
    pub env_temperature: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            gamma: 1.0,
            agent_temperature: 0.5,
            env_temperature: 0.5,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.horizon == 0 {
            return Err(EnvError::InvalidConfig("horizon must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(EnvError::InvalidConfig("gamma must lie in [0, 1]".into()));
        }
        if !(self.agent_temperature > 0.0 && self.env_temperature > 0.0) {
            return Err(EnvError::InvalidConfig("temperatures must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Entity,
    pub action: ActionCandidate,
    pub next_state: Entity,
    pub reward: f64,
    pub step_index: usize,
}

/// One H-step rollout.
///
/// `values` has H + 1 entries; the last is 0 because the episode terminates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub log_probs: Vec<f64>,
    /// Index of the sampled action within the state's action set, per step.
    pub action_indices: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(rename = "return")]
    pub return_: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.transitions.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    pub fn terminal(&self) -> Option<&Entity> {
        self.transitions.last().map(|t| &t.next_state)
    }

    /// Utility credited at the last step.
    pub fn terminal_reward(&self) -> f64 {
        self.transitions.last().map_or(0.0, |t| t.reward)
    }
}

/// A transition function over entities.
///
/// Implementations must be callable from several rollout workers at once;
/// all randomness comes from the caller-owned `rng`.
pub trait Environment: Send + Sync {
    fn step(
        &self,
        state: &Entity,
        action: &ActionCandidate,
        rng: &mut ChaCha8Rng,
    ) -> Result<Entity, EnvError>;

    /// Seed mixed into each episode's environment stream.
    fn seed(&self) -> u64 {
        0
    }
}

/// Zeroes every reward except the last, which becomes the utility of the
/// terminal entity. The discounted return is recomputed with `gamma`.
pub fn assign_rewards<F>(
    mut trajectory: Trajectory,
    horizon: usize,
    gamma: f64,
    utility_eval: F,
) -> Result<Trajectory, EnvError>
where
    F: FnOnce(&Entity) -> Result<f64, EnvError>,
{
    let actual = trajectory.transitions.len();
    if actual != horizon || horizon == 0 {
        return Err(EnvError::TrajectoryLength {
            expected: horizon,
            actual,
        });
    }
    let terminal = utility_eval(trajectory.terminal().expect("nonempty"))?;
    for (t, tr) in trajectory.transitions.iter_mut().enumerate() {
        tr.step_index = t;
        tr.reward = if t + 1 == horizon { terminal } else { 0.0 };
    }
    trajectory.return_ = gamma.powi(horizon as i32 - 1) * terminal;
    Ok(trajectory)
}

/// Replaces missing candidate features with the mean next-state embedding
/// over `samples` environment calls from `state`.
pub fn estimate_features(
    actions: &mut ActionSet,
    state: &Entity,
    env: &dyn Environment,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize, EnvError> {
    let mut estimated = 0;
    for c in actions.candidates_mut() {
        if c.feature.is_some() {
            continue;
        }
        c.feature = Some(mean_next_embedding(env, state, c, samples, rng)?);
        estimated += 1;
    }
    Ok(estimated)
}

pub(crate) fn mean_next_embedding(
    env: &dyn Environment,
    state: &Entity,
    action: &ActionCandidate,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EmbeddingVector, EnvError> {
    let samples = samples.max(1);
    let mut acc = vec![0.0; state.embedding.dim()];
    for _ in 0..samples {
        let next = env.step(state, action, rng)?;
        state.embedding.check_dim(&next.embedding)?;
        for (a, x) in acc.iter_mut().zip(next.embedding.as_slice()) {
            *a += x;
        }
    }
    Ok(EmbeddingVector::new(acc.into_iter().map(|a| a / samples as f64).collect())?)
}

/// Environment random stream for one episode.
pub fn episode_env_rng(env_seed: u64, run_seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(env_seed ^ run_seed.rotate_left(17) ^ 0x5EED_E7F1);
    rng.set_stream(episode);
    rng
}
