//! The 2-D noiseless steering toy shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use eagle_core::design::{ActionCandidate, ActionSet, ActionTable, StateId};
use eagle_core::embedding::EmbeddingVector;
use eagle_core::environment::{Entity, Environment, SimDynamicsConfig, SimEnvironment};
use eagle_core::trainer::RewardModel;
use eagle_core::utility::UtilityError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn v(values: &[f64]) -> EmbeddingVector {
    EmbeddingVector::new(values.to_vec()).unwrap()
}

/// Terminal utility `<z_u, z>`.
pub struct Affinity(pub EmbeddingVector);

impl RewardModel for Affinity {
    fn terminal_utility(&self, _anchor: StateId, z: &EmbeddingVector) -> Result<f64, UtilityError> {
        Ok(self.0.dot(z)?)
    }
}

pub struct Toy {
    pub env: SimEnvironment,
    pub anchors: Vec<Entity>,
    pub actions: ActionTable,
    pub reward: Affinity,
}

/// Five displacements on a regular pentagon of radius `r`; action 0 points
/// along the user vector (1, 0). Candidate features are next-state embeddings.
pub fn toy_at(r: f64, anchors: &[[f64; 2]]) -> Toy {
    let disp: BTreeMap<u64, EmbeddingVector> = (0..5u64)
        .map(|k| {
            let th = 2.0 * std::f64::consts::PI * k as f64 / 5.0;
            (k, v(&[r * th.cos(), r * th.sin()]))
        })
        .collect();
    let anchors: Vec<Entity> = anchors
        .iter()
        .enumerate()
        .map(|(i, p)| Entity::anchor(i as u64, v(p)))
        .collect();
    let actions = anchors
        .iter()
        .map(|a| {
            let set = ActionSet::new(
                a.id,
                disp.iter()
                    .map(|(&k, d)| ActionCandidate::new(k, format!("a{k}"), a.embedding.add(d).unwrap()))
                    .collect(),
            )
            .unwrap();
            (a.id, set)
        })
        .collect();
    Toy {
        env: SimEnvironment::new(SimDynamicsConfig::new(disp, 0.0, 0)),
        anchors,
        actions,
        reward: Affinity(v(&[1.0, 0.0])),
    }
}

pub fn toy(r: f64) -> Toy {
    toy_at(r, &[[0.0, 0.0]])
}

/// Best terminal utility over every length-`horizon` action sequence from
/// the first anchor, by explicit enumeration through the environment.
pub fn exhaustive_optimum(toy: &Toy, horizon: usize) -> (f64, usize) {
    let anchor = &toy.anchors[0];
    let set = &toy.actions[&anchor.id];
    let k = set.len();
    let sequences = k.pow(horizon as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut best = f64::NEG_INFINITY;
    for code in 0..sequences {
        let mut state = anchor.clone();
        let mut c = code;
        for _ in 0..horizon {
            state = toy.env.step(&state, &set.candidates()[c % k], &mut rng).unwrap();
            c /= k;
        }
        best = best.max(toy.reward.terminal_utility(anchor.id, &state.embedding).unwrap());
    }
    (best, sequences)
}
