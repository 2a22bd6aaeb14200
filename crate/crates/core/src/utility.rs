//! Content-gap utility and the general composite utility over latent points.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{
    k_nearest_neighbors, l2_distance, predict_rating, EmbeddingCatalog, EmbeddingError,
    EmbeddingVector, ItemId,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UtilityError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("rating scale ({min}, {max}) is degenerate")]
    DegenerateScale { min: f64, max: f64 },
    #[error("invalid utility configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UtilityConfig {
    /// Weight on the summed neighbor distances.
    pub lambda: f64,
    pub neighbor_count: usize,
    /// Rescale the affinity term from `affinity_scale` to [0, 1].
    pub normalize_affinity: bool,
    pub affinity_scale: (f64, f64),
}

impl Default for UtilityConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            neighbor_count: 3,
            normalize_affinity: false,
            affinity_scale: (1.0, 5.0),
        }
    }
}

impl UtilityConfig {
    pub fn validate(&self) -> Result<(), UtilityError> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(UtilityError::InvalidConfig("lambda must be finite and >= 0".into()));
        }
        if self.neighbor_count == 0 {
            return Err(UtilityError::InvalidConfig("neighbor_count must be >= 1".into()));
        }
        if self.normalize_affinity {
            let (min, max) = self.affinity_scale;
            if max.is_nan() || min.is_nan() || max <= min {
                return Err(UtilityError::DegenerateScale { min, max });
            }
        }
        Ok(())
    }
}

/// Affine map of `raw` from `scale` onto [0, 1], clamped.
pub fn normalize_rating(raw: f64, scale: (f64, f64)) -> Result<f64, UtilityError> {
    let (min, max) = scale;
    if !min.is_finite() || !max.is_finite() || max <= min {
        return Err(UtilityError::DegenerateScale { min, max });
    }
    Ok(((raw - min) / (max - min)).clamp(0.0, 1.0))
}

/// `<z_u, z> + lambda * sum of distances from z to its nearest catalog items`.
pub fn content_gap_utility(
    z: &EmbeddingVector,
    user: &EmbeddingVector,
    catalog: &EmbeddingCatalog,
    cfg: &UtilityConfig,
    exclude: &BTreeSet<ItemId>,
) -> Result<f64, UtilityError> {
    cfg.validate()?;
    let mut affinity = predict_rating(user, z)?;
    if cfg.normalize_affinity {
        affinity = normalize_rating(affinity, cfg.affinity_scale)?;
    }
    let neighbors = k_nearest_neighbors(z, catalog, cfg.neighbor_count, exclude)?;
    let spread: f64 = neighbors.iter().map(|(_, d)| d).sum();
    Ok(affinity + cfg.lambda * spread)
}

/// A weighted inner-product affinity term, `weight * <embedding, z>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityTerm {
    pub embedding: EmbeddingVector,
    pub weight: f64,
    /// When set, the inner product is mapped to [0, 1] from this scale first.
    pub normalize: Option<(f64, f64)>,
}

impl AffinityTerm {
    pub fn new(embedding: EmbeddingVector) -> Self {
        Self {
            embedding,
            weight: 1.0,
            normalize: None,
        }
    }

    fn eval(&self, z: &EmbeddingVector) -> Result<f64, UtilityError> {
        let mut x = self.embedding.dot(z)?;
        if let Some(scale) = self.normalize {
            x = normalize_rating(x, scale)?;
        }
        Ok(self.weight * x)
    }
}

/// Transform applied to each neighbor distance before summation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistanceTransform {
    Identity,
    /// `1 - exp(-d / scale)`: rewards distance with diminishing returns.
    Saturating { scale: f64 },
}

impl DistanceTransform {
    fn apply(&self, d: f64) -> f64 {
        match *self {
            DistanceTransform::Identity => d,
            DistanceTransform::Saturating { scale } => 1.0 - (-d / scale).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceTerm {
    pub weight: f64,
    pub transform: DistanceTransform,
    /// Restrict the sum to this many nearest items; `None` sums over all.
    pub neighbor_count: Option<usize>,
    pub exclude: BTreeSet<ItemId>,
}

/// Users' utility + creators' utility + distance from existing content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeUtilityTerms {
    pub user_terms: Vec<AffinityTerm>,
    pub creator_terms: Vec<AffinityTerm>,
    pub distance_term: Option<DistanceTerm>,
}

impl CompositeUtilityTerms {
    pub fn empty() -> Self {
        Self {
            user_terms: Vec::new(),
            creator_terms: Vec::new(),
            distance_term: None,
        }
    }

    /// The composite form that reduces to [`content_gap_utility`].
    pub fn content_gap(
        user: &EmbeddingVector,
        cfg: &UtilityConfig,
        exclude: &BTreeSet<ItemId>,
    ) -> Self {
        let mut term = AffinityTerm::new(user.clone());
        if cfg.normalize_affinity {
            term.normalize = Some(cfg.affinity_scale);
        }
        Self {
            user_terms: vec![term],
            creator_terms: Vec::new(),
            distance_term: Some(DistanceTerm {
                weight: cfg.lambda,
                transform: DistanceTransform::Identity,
                neighbor_count: Some(cfg.neighbor_count),
                exclude: exclude.clone(),
            }),
        }
    }
}

pub fn composite_utility(
    z: &EmbeddingVector,
    terms: &CompositeUtilityTerms,
    catalog: &EmbeddingCatalog,
) -> Result<f64, UtilityError> {
    let mut total = 0.0;
    for t in terms.user_terms.iter().chain(&terms.creator_terms) {
        total += t.eval(z)?;
    }
    if let Some(dt) = &terms.distance_term {
        let distances: Vec<f64> = match dt.neighbor_count {
            Some(k) => k_nearest_neighbors(z, catalog, k, &dt.exclude)?
                .into_iter()
                .map(|(_, d)| d)
                .collect(),
            None => catalog
                .items()
                .iter()
                .filter(|(id, _)| !dt.exclude.contains(id))
                .map(|(_, v)| l2_distance(z, v))
                .collect::<Result<_, _>>()?,
        };
        total += dt.weight * distances.into_iter().map(|d| dt.transform.apply(d)).sum::<f64>();
    }
    Ok(total)
}

/// Utility over latent points, as seen by the environment and trainer.
pub trait Objective: Send + Sync {
    fn utility(&self, z: &EmbeddingVector) -> Result<f64, UtilityError>;
}

/// Content-gap utility for one user against a fixed catalog.
#[derive(Debug, Clone)]
pub struct ContentGapObjective {
    pub user: EmbeddingVector,
    pub catalog: std::sync::Arc<EmbeddingCatalog>,
    pub cfg: UtilityConfig,
    pub exclude: BTreeSet<ItemId>,
}

impl Objective for ContentGapObjective {
    fn utility(&self, z: &EmbeddingVector) -> Result<f64, UtilityError> {
        content_gap_utility(z, &self.user, &self.catalog, &self.cfg, &self.exclude)
    }
}

impl Objective for (CompositeUtilityTerms, std::sync::Arc<EmbeddingCatalog>) {
    fn utility(&self, z: &EmbeddingVector) -> Result<f64, UtilityError> {
        composite_utility(z, &self.0, &self.1)
    }
}
