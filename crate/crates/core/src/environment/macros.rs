//! Macro actions: several action prompts executed as one environment step.

use rand_chacha::ChaCha8Rng;

use super::{mean_next_embedding, EnvError, Entity, Environment};
use crate::design::{ActionCandidate, ActionId, ActionSet};
use crate::embedding::EmbeddingVector;

/// How a macro action's next-state feature is obtained.
pub enum MacroSemantics<'a> {
    /// Sum of the part features.
    SumOfParts,
    /// `base + sum_i (feature_i - base)`: additive dynamics when part features
    /// are next-state embeddings taken from `base`.
    OffsetFrom(&'a EmbeddingVector),
    /// One or more environment calls with the bundled prompt from `state`.
    Estimate {
        env: &'a dyn Environment,
        state: &'a Entity,
        samples: usize,
        rng: &'a mut ChaCha8Rng,
    },
}

/// Prompt text for a bundle: a numbered list of the part prompts.
fn bundle_prompt(parts: &[ActionCandidate]) -> String {
    let mut out = String::from("Make all of the following changes at once:\n");
    for (i, p) in parts.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, p.prompt_text));
    }
    out
}

/// Bundles `parts` (exactly `bundle_size` of them) into a single action.
/// A bundle of one keeps the part's text and feature unchanged.
pub fn make_macro_action(
    id: ActionId,
    parts: &[ActionCandidate],
    bundle_size: usize,
    semantics: MacroSemantics<'_>,
) -> Result<ActionCandidate, EnvError> {
    if parts.is_empty() || parts.len() != bundle_size {
        return Err(EnvError::MacroSize {
            expected: bundle_size,
            actual: parts.len(),
        });
    }
    if bundle_size == 1 {
        return Ok(ActionCandidate {
            id,
            ..parts[0].clone()
        });
    }
    let mut action = ActionCandidate {
        id,
        prompt_text: bundle_prompt(parts),
        feature: None,
        personalized: parts.iter().any(|p| p.personalized),
        category: parts[0].category,
    };
    let feature = match semantics {
        MacroSemantics::SumOfParts => {
            let mut total = parts[0].feature()?.clone();
            for p in &parts[1..] {
                total = total.add(p.feature()?)?;
            }
            total
        }
        MacroSemantics::OffsetFrom(base) => {
            let mut total = base.clone();
            for p in parts {
                total = total.add(&p.feature()?.sub(base)?)?;
            }
            total
        }
        MacroSemantics::Estimate {
            env,
            state,
            samples,
            rng,
        } => mean_next_embedding(env, state, &action, samples, rng)?,
    };
    action.feature = Some(feature);
    Ok(action)
}

/// Base candidates followed by macro candidates.
pub fn combined_action_space(
    base: &ActionSet,
    macros: impl IntoIterator<Item = ActionCandidate>,
) -> Result<ActionSet, EnvError> {
    Ok(base.extended(macros)?)
}
