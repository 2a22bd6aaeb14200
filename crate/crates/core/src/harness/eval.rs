//! Evaluation reports and the encoder consistency check.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::embedding::{l2_distance, predict_rating, EmbeddingCatalog, EmbeddingVector};
use crate::environment::Encoder;
use crate::policy::{ActingPolicy, ReferencePolicy};
use crate::trainer::{anchor_index, collect_rollouts, RolloutContext};

/// Mean with its standard error (n - 1 denominator; 0 below two samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return Self {
                mean: f64::NAN,
                std_error: f64::NAN,
                count,
            };
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let std_error = if count < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
            (var / count as f64).sqrt()
        };
        Self { mean, std_error, count }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub overall: Summary,
    /// Keyed `low` / `high` by the anchor's predicted rating.
    pub buckets: BTreeMap<String, Summary>,
    pub episodes: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub policy: PolicyReport,
    /// Reference policies rolled out on the same episodes.
    pub references: BTreeMap<String, PolicyReport>,
}

pub struct EvalSettings<'a> {
    pub episodes: usize,
    pub seed: u64,
    pub user: &'a EmbeddingVector,
    pub bucket_threshold: f64,
}

fn report(
    agent: &dyn ActingPolicy,
    ctx: &RolloutContext<'_>,
    settings: &EvalSettings<'_>,
) -> Result<PolicyReport, HarnessError> {
    let batch = collect_rollouts(agent, ctx, None, settings.episodes, settings.seed, 0)?;
    let index = anchor_index(ctx.anchors);
    let mut all = Vec::with_capacity(batch.trajectories.len());
    let mut buckets: BTreeMap<String, Vec<f64>> = [("high".to_string(), vec![]), ("low".to_string(), vec![])].into();
    for traj in &batch.trajectories {
        let u = traj.terminal_reward();
        let anchor = traj.transitions[0].state.id;
        let rating = predict_rating(settings.user, &index[&anchor].embedding)?;
        let key = if rating < settings.bucket_threshold { "low" } else { "high" };
        buckets.get_mut(key).expect("bucket").push(u);
        all.push(u);
    }
    Ok(PolicyReport {
        overall: Summary::of(&all),
        buckets: buckets.into_iter().map(|(k, v)| (k, Summary::of(&v))).collect(),
        episodes: batch.trajectories.len(),
        dropped: batch.dropped,
    })
}

/// Rolls out `policy` and each reference on the same episode indices and
/// seed, so anchors and random streams are paired across policies.
pub fn run_eval(
    policy: &dyn ActingPolicy,
    references: &[&ReferencePolicy],
    ctx: &RolloutContext<'_>,
    settings: &EvalSettings<'_>,
) -> Result<EvalReport, HarnessError> {
    let mut out = EvalReport {
        seed: settings.seed,
        policy: report(policy, ctx, settings)?,
        references: BTreeMap::new(),
    };
    for r in references {
        out.references.insert(r.kind.as_str().to_string(), report(*r, ctx, settings)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderCheck {
    pub mean_holdout_error: f64,
    pub mean_nn_gap: f64,
    pub passed: bool,
    pub pairs: usize,
}

pub const MIN_HOLDOUT_PAIRS: usize = 10;

/// Passes iff the mean L2 error of `encoder` on held-out `(text, target)`
/// pairs is below the mean distance from each catalog item to its nearest
/// other item.
pub fn encoder_consistency_check(
    profiles: &[(String, EmbeddingVector)],
    encoder: &dyn Encoder,
    catalog: &EmbeddingCatalog,
) -> Result<EncoderCheck, HarnessError> {
    if profiles.len() < MIN_HOLDOUT_PAIRS {
        return Err(HarnessError::Data(format!(
            "encoder check needs at least {MIN_HOLDOUT_PAIRS} held-out pairs, got {}",
            profiles.len()
        )));
    }
    if catalog.len() < 2 {
        return Err(HarnessError::Data("encoder check needs at least 2 catalog items".into()));
    }
    let mut err = 0.0;
    for (text, target) in profiles {
        let z = encoder.encode(text).map_err(crate::environment::EnvError::from)?;
        err += l2_distance(&z, target)?;
    }
    let items: Vec<&EmbeddingVector> = catalog.items().values().collect();
    let mut gap = 0.0;
    for (i, a) in items.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, b) in items.iter().enumerate() {
            if i != j {
                best = best.min(l2_distance(a, b)?);
            }
        }
        gap += best;
    }
    let mean_holdout_error = err / profiles.len() as f64;
    let mean_nn_gap = gap / items.len() as f64;
    Ok(EncoderCheck {
        mean_holdout_error,
        mean_nn_gap,
        passed: mean_holdout_error < mean_nn_gap,
        pairs: profiles.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std_error - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[2.0, 2.0, 2.0]).std_error, 0.0);
        assert_eq!(Summary::of(&[7.0]).std_error, 0.0);
        assert_eq!(Summary::of(&[]).count, 0);
    }
}
