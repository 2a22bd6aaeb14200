//! Behavioral embeddings: latent vectors, the user/item catalog, and
//! brute-force neighbor queries over the latent space.

mod wals;

pub use wals::{wals_fit, WalsConfig, WalsFit};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a catalog item (an entity in the dataset).
pub type ItemId = u64;
/// Identifier of a user.
pub type UserId = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding has a non-finite component at index {index}")]
    NonFinite { index: usize },
    #[error("latent dimension must be at least 1")]
    ZeroDimension,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("ratings matrix is empty")]
    EmptyRatings,
    #[error("cell ({user}, {item}) is out of range for a {users}x{items} matrix")]
    IndexOutOfRange {
        user: usize,
        item: usize,
        users: usize,
        items: usize,
    },
    #[error("duplicate cell for user {user}, item {item}")]
    DuplicateCell { user: usize, item: usize },
    #[error("cell ({user}, {item}) has invalid weight {weight}")]
    InvalidWeight { user: usize, item: usize, weight: f64 },
    #[error("cell ({user}, {item}) has non-finite rating")]
    InvalidRating { user: usize, item: usize },
    #[error("{side} {index} has {observed} observations, fewer than dimension {dim}, and no regularization")]
    UnderdeterminedFactor {
        side: &'static str,
        index: usize,
        observed: usize,
        dim: usize,
    },
    #[error("normal equations for {side} {index} are singular")]
    SingularSystem { side: &'static str, index: usize },
    #[error("requested {requested} neighbors but only {available} items are eligible")]
    InsufficientItems { requested: usize, available: usize },
    #[error("neighbor count must be at least 1")]
    ZeroNeighbors,
}

/// A point in the latent embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::ZeroDimension);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    /// Unit vector along axis `axis`.
    pub fn basis(dim: usize, axis: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn check_dim(&self, other: &Self) -> Result<(), EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64, EmbeddingError> {
        self.check_dim(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn add(&self, other: &Self) -> Result<Self, EmbeddingError> {
        self.check_dim(other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Result<Self, EmbeddingError> {
        self.check_dim(other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, factor: f64) -> Result<Self, EmbeddingError> {
        Self::new(self.0.iter().map(|a| a * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = EmbeddingError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// One observed cell of a ratings matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingCell {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub weight: f64,
}

impl RatingCell {
    pub fn new(user: usize, item: usize, rating: f64) -> Self {
        Self {
            user,
            item,
            rating,
            weight: 1.0,
        }
    }
}

/// Sparse ratings over densely indexed users and items.
///
/// `user_ids` and `item_ids` map dense indices back to external ids; they
/// default to the identity mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingsMatrix {
    user_count: usize,
    item_count: usize,
    cells: Vec<RatingCell>,
    user_ids: Vec<UserId>,
    item_ids: Vec<ItemId>,
}

impl RatingsMatrix {
    pub fn new(
        user_count: usize,
        item_count: usize,
        cells: Vec<RatingCell>,
    ) -> Result<Self, EmbeddingError> {
        let user_ids = (0..user_count as u64).collect();
        let item_ids = (0..item_count as u64).collect();
        Self::with_ids(cells, user_ids, item_ids)
    }

    pub fn with_ids(
        cells: Vec<RatingCell>,
        user_ids: Vec<UserId>,
        item_ids: Vec<ItemId>,
    ) -> Result<Self, EmbeddingError> {
        let (users, items) = (user_ids.len(), item_ids.len());
        let mut seen = BTreeSet::new();
        for c in &cells {
            if c.user >= users || c.item >= items {
                return Err(EmbeddingError::IndexOutOfRange {
                    user: c.user,
                    item: c.item,
                    users,
                    items,
                });
            }
            if !c.rating.is_finite() {
                return Err(EmbeddingError::InvalidRating {
                    user: c.user,
                    item: c.item,
                });
            }
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(EmbeddingError::InvalidWeight {
                    user: c.user,
                    item: c.item,
                    weight: c.weight,
                });
            }
            if !seen.insert((c.user, c.item)) {
                return Err(EmbeddingError::DuplicateCell {
                    user: c.user,
                    item: c.item,
                });
            }
        }
        Ok(Self {
            user_count: users,
            item_count: items,
            cells,
            user_ids,
            item_ids,
        })
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn cells(&self) -> &[RatingCell] {
        &self.cells
    }

    pub fn user_ids(&self) -> &[UserId] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[ItemId] {
        &self.item_ids
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Fitted user and item embeddings sharing one latent dimension.
///
/// Immutable once built; lookups and neighbor queries take `&self`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCatalog {
    dim: usize,
    users: BTreeMap<UserId, EmbeddingVector>,
    items: BTreeMap<ItemId, EmbeddingVector>,
}

impl EmbeddingCatalog {
    pub fn new(
        dim: usize,
        users: BTreeMap<UserId, EmbeddingVector>,
        items: BTreeMap<ItemId, EmbeddingVector>,
    ) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDimension);
        }
        for v in users.values().chain(items.values()) {
            if v.dim() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: dim,
                    actual: v.dim(),
                });
            }
        }
        Ok(Self { dim, users, items })
    }

    /// A catalog of items only.
    pub fn from_items(
        dim: usize,
        items: impl IntoIterator<Item = (ItemId, EmbeddingVector)>,
    ) -> Result<Self, EmbeddingError> {
        Self::new(dim, BTreeMap::new(), items.into_iter().collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of items, N.
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, id: ItemId) -> Option<&EmbeddingVector> {
        self.items.get(&id)
    }

    pub fn user(&self, id: UserId) -> Option<&EmbeddingVector> {
        self.users.get(&id)
    }

    pub fn items(&self) -> &BTreeMap<ItemId, EmbeddingVector> {
        &self.items
    }

    pub fn users(&self) -> &BTreeMap<UserId, EmbeddingVector> {
        &self.users
    }
}

/// Inner product of a user and an item embedding.
pub fn predict_rating(
    user: &EmbeddingVector,
    item: &EmbeddingVector,
) -> Result<f64, EmbeddingError> {
    user.dot(item)
}

pub fn l2_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    a.check_dim(b)?;
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// The `k` catalog items closest to `query`, ascending by distance with
/// ties broken by ascending id. Items in `exclude` are skipped.
pub fn k_nearest_neighbors(
    query: &EmbeddingVector,
    catalog: &EmbeddingCatalog,
    k: usize,
    exclude: &BTreeSet<ItemId>,
) -> Result<Vec<(ItemId, f64)>, EmbeddingError> {
    if k == 0 {
        return Err(EmbeddingError::ZeroNeighbors);
    }
    if query.dim() != catalog.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: catalog.dim(),
            actual: query.dim(),
        });
    }
    let mut scored = Vec::with_capacity(catalog.len());
    for (&id, v) in catalog.items() {
        if exclude.contains(&id) {
            continue;
        }
        scored.push((id, l2_distance(query, v)?));
    }
    if scored.len() < k {
        return Err(EmbeddingError::InsufficientItems {
            requested: k,
            available: scored.len(),
        });
    }
    // BTreeMap iteration is already id-ascending, and the sort is stable.
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    scored.truncate(k);
    Ok(scored)
}
