//! Additive embedding-space simulator.
//!
//! The next embedding is `z + displacement(action) + sigma * xi` with `xi`
//! standard normal. Texts are synthetic labels recording the action chain.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EnvError, Entity, Environment};
use crate::design::{ActionCandidate, ActionId, ActionSet, StateId};
use crate::embedding::EmbeddingVector;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimDynamicsConfig {
    /// Displacement per action id, shared across states.
    pub displacement: BTreeMap<ActionId, EmbeddingVector>,
    /// Per-state displacements, consulted before `displacement`.
    pub scoped_displacement: BTreeMap<(StateId, ActionId), EmbeddingVector>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SimDynamicsConfig {
    pub fn new(displacement: BTreeMap<ActionId, EmbeddingVector>, noise_sigma: f64, seed: u64) -> Self {
        Self {
            displacement,
            scoped_displacement: BTreeMap::new(),
            noise_sigma,
            seed,
        }
    }

    /// Scoped displacements `feature - anchor` for every candidate of every
    /// state, so that one step from the anchor lands on the candidate's
    /// estimated next-state embedding.
    pub fn from_action_features<'a>(
        sets: impl IntoIterator<Item = (&'a EmbeddingVector, &'a ActionSet)>,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self, EnvError> {
        let mut cfg = Self {
            noise_sigma,
            seed,
            ..Self::default()
        };
        for (anchor, set) in sets {
            for c in set.candidates() {
                let d = c.feature()?.sub(anchor)?;
                cfg.scoped_displacement.insert((set.state_id, c.id), d);
            }
        }
        Ok(cfg)
    }

    pub fn lookup(&self, state: StateId, action: ActionId) -> Option<&EmbeddingVector> {
        self.scoped_displacement
            .get(&(state, action))
            .or_else(|| self.displacement.get(&action))
    }

    /// Registers `macro_id` as the sum of its parts' displacements.
    pub fn register_macro(
        &mut self,
        state: Option<StateId>,
        macro_id: ActionId,
        parts: &[ActionId],
    ) -> Result<(), EnvError> {
        let mut total: Option<EmbeddingVector> = None;
        for &p in parts {
            let d = match state {
                Some(s) => self.lookup(s, p),
                None => self.displacement.get(&p),
            }
            .ok_or(EnvError::UnknownAction(p))?;
            total = Some(match total {
                None => d.clone(),
                Some(t) => t.add(d)?,
            });
        }
        let total = total.ok_or(EnvError::MacroSize {
            expected: 1,
            actual: 0,
        })?;
        match state {
            Some(s) => self.scoped_displacement.insert((s, macro_id), total),
            None => self.displacement.insert(macro_id, total),
        };
        Ok(())
    }
}

pub fn sim_step(
    state: &Entity,
    action: &ActionCandidate,
    cfg: &SimDynamicsConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Entity, EnvError> {
    let d = cfg
        .lookup(state.id, action.id)
        .ok_or(EnvError::UnknownAction(action.id))?;
    let mut next = state.embedding.add(d)?.into_inner();
    if cfg.noise_sigma > 0.0 {
        for x in next.iter_mut() {
            let xi: f64 = StandardNormal.sample(rng);
            *x += cfg.noise_sigma * xi;
        }
    }
    Ok(Entity::with_embedding(
        state.id,
        format!("{} + a{}", state.text, action.id),
        EmbeddingVector::new(next)?,
    ))
}

#[derive(Debug, Clone)]
pub struct SimEnvironment {
    pub dynamics: SimDynamicsConfig,
}

impl SimEnvironment {
    pub fn new(dynamics: SimDynamicsConfig) -> Self {
        Self { dynamics }
    }
}

impl Environment for SimEnvironment {
    fn step(
        &self,
        state: &Entity,
        action: &ActionCandidate,
        rng: &mut ChaCha8Rng,
    ) -> Result<Entity, EnvError> {
        sim_step(state, action, &self.dynamics, rng)
    }

    fn seed(&self) -> u64 {
        self.dynamics.seed
    }
}
