//! Weighted alternating least squares over a sparse ratings matrix.
//!
//! Minimizes
//!
//! ```text
//! sum_obs w_um (r_um - <u, v>)^2 + w0 * sum_unobs <u, v>^2 + reg * (sum |u|^2 + sum |v|^2)
//! ```
//!
//! by alternating exact ridge solves for the user and item factors. Each
//! half-sweep is the exact minimizer in its block, so the objective never
//! increases (up to rounding).

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EmbeddingCatalog, EmbeddingError, EmbeddingVector, ItemId, RatingsMatrix, UserId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalsConfig {
    /// Latent dimension n.
    pub dim: usize,
    /// Maximum number of alternating passes.
    pub sweeps: usize,
    /// Ridge coefficient applied to every factor.
    pub regularization: f64,
    /// Weight given to unobserved cells (treated as rating 0). Zero fits
    /// observed cells only.
    pub unobserved_weight: f64,
    pub seed: u64,
    /// Stop once a sweep lowers the objective by less than this.
    pub tolerance: f64,
}

impl Default for WalsConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            sweeps: 50,
            regularization: 0.1,
            unobserved_weight: 0.0,
            seed: 0,
            tolerance: 1e-9,
        }
    }
}

impl WalsConfig {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.dim == 0 {
            return Err(EmbeddingError::ZeroDimension);
        }
        if self.sweeps == 0 {
            return Err(EmbeddingError::InvalidConfig("sweeps must be >= 1".into()));
        }
        if !(self.regularization.is_finite() && self.regularization >= 0.0) {
            return Err(EmbeddingError::InvalidConfig(
                "regularization must be finite and >= 0".into(),
            ));
        }
        if !(self.unobserved_weight.is_finite() && self.unobserved_weight >= 0.0) {
            return Err(EmbeddingError::InvalidConfig(
                "unobserved_weight must be finite and >= 0".into(),
            ));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(EmbeddingError::InvalidConfig("tolerance must be > 0".into()));
        }
        Ok(())
    }
}

/// Result of a WALS fit: the catalog plus fit diagnostics.
#[derive(Debug, Clone)]
pub struct WalsFit {
    pub catalog: EmbeddingCatalog,
    /// Objective before the first sweep, then after every sweep.
    pub objective_history: Vec<f64>,
    pub sweeps_run: usize,
    /// External ids of users with no observed cells (left out of the catalog).
    pub dropped_users: Vec<UserId>,
    pub dropped_items: Vec<ItemId>,
}

/// Sparse cell stored against compacted row/column indices.
#[derive(Clone, Copy)]
struct Entry {
    other: usize,
    rating: f64,
    weight: f64,
}

struct Side {
    /// Per-row list of (column, rating, weight).
    rows: Vec<Vec<Entry>>,
    factors: Vec<f64>,
}

pub fn wals_fit(ratings: &RatingsMatrix, cfg: &WalsConfig) -> Result<WalsFit, EmbeddingError> {
    cfg.validate()?;
    if ratings.is_empty() {
        return Err(EmbeddingError::EmptyRatings);
    }
    let n = cfg.dim;

    // Compact away users and items without any observed cell.
    let mut user_seen = vec![false; ratings.user_count()];
    let mut item_seen = vec![false; ratings.item_count()];
    for c in ratings.cells() {
        user_seen[c.user] = true;
        item_seen[c.item] = true;
    }
    let (user_map, dropped_users) = compact(&user_seen, ratings.user_ids());
    let (item_map, dropped_items) = compact(&item_seen, ratings.item_ids());
    for id in &dropped_users {
        warn!("wals: dropping user {id} with no observed ratings");
    }
    for id in &dropped_items {
        warn!("wals: dropping item {id} with no observed ratings");
    }
    let kept_users: Vec<usize> = (0..user_seen.len()).filter(|&i| user_seen[i]).collect();
    let kept_items: Vec<usize> = (0..item_seen.len()).filter(|&i| item_seen[i]).collect();

    let mut user_rows = vec![Vec::new(); kept_users.len()];
    let mut item_rows = vec![Vec::new(); kept_items.len()];
    for c in ratings.cells() {
        let (u, m) = (user_map[c.user].unwrap(), item_map[c.item].unwrap());
        user_rows[u].push(Entry {
            other: m,
            rating: c.rating,
            weight: c.weight,
        });
        item_rows[m].push(Entry {
            other: u,
            rating: c.rating,
            weight: c.weight,
        });
    }

    if cfg.regularization == 0.0 && cfg.unobserved_weight == 0.0 {
        check_determined("user", &user_rows, n)?;
        check_determined("item", &item_rows, n)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 1.0 / (n as f64).sqrt();
    let mut init = |rows: usize| -> Vec<f64> {
        (0..rows * n).map(|_| rng.random_range(-bound..=bound)).collect()
    };
    let mut users = Side {
        factors: init(user_rows.len()),
        rows: user_rows,
    };
    let mut items = Side {
        factors: init(item_rows.len()),
        rows: item_rows,
    };

    let mut history = vec![objective(&users, &items, n, cfg)];
    let mut sweeps_run = 0;
    for _ in 0..cfg.sweeps {
        solve_side("user", &mut users, &items, n, cfg)?;
        solve_side("item", &mut items, &users, n, cfg)?;
        sweeps_run += 1;
        let current = objective(&users, &items, n, cfg);
        let previous = *history.last().unwrap();
        history.push(current);
        if previous - current < cfg.tolerance {
            break;
        }
    }

    let to_map = |side: &Side, kept: &[usize], ids: &[u64]| -> Result<BTreeMap<u64, EmbeddingVector>, EmbeddingError> {
        kept.iter()
            .enumerate()
            .map(|(row, &orig)| {
                let v = side.factors[row * n..(row + 1) * n].to_vec();
                Ok((ids[orig], EmbeddingVector::new(v)?))
            })
            .collect()
    };
    let catalog = EmbeddingCatalog::new(
        n,
        to_map(&users, &kept_users, ratings.user_ids())?,
        to_map(&items, &kept_items, ratings.item_ids())?,
    )?;
    Ok(WalsFit {
        catalog,
        objective_history: history,
        sweeps_run,
        dropped_users,
        dropped_items,
    })
}

fn compact(seen: &[bool], ids: &[u64]) -> (Vec<Option<usize>>, Vec<u64>) {
    let mut map = vec![None; seen.len()];
    let mut dropped = Vec::new();
    let mut next = 0;
    for (i, &s) in seen.iter().enumerate() {
        if s {
            map[i] = Some(next);
            next += 1;
        } else {
            dropped.push(ids[i]);
        }
    }
    (map, dropped)
}

fn check_determined(side: &'static str, rows: &[Vec<Entry>], n: usize) -> Result<(), EmbeddingError> {
    for (index, row) in rows.iter().enumerate() {
        let observed = row.iter().filter(|e| e.weight > 0.0).count();
        if observed < n {
            return Err(EmbeddingError::UnderdeterminedFactor {
                side,
                index,
                observed,
                dim: n,
            });
        }
    }
    Ok(())
}

/// Gram matrix of all factors on one side.
fn gram(side: &Side, n: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(n, n);
    for row in side.factors.chunks_exact(n) {
        for i in 0..n {
            for j in 0..n {
                g[(i, j)] += row[i] * row[j];
            }
        }
    }
    g
}

fn solve_side(
    name: &'static str,
    target: &mut Side,
    fixed: &Side,
    n: usize,
    cfg: &WalsConfig,
) -> Result<(), EmbeddingError> {
    let w0 = cfg.unobserved_weight;
    let base = {
        let mut b = if w0 > 0.0 {
            gram(fixed, n) * w0
        } else {
            DMatrix::zeros(n, n)
        };
        for i in 0..n {
            b[(i, i)] += cfg.regularization;
        }
        b
    };
    for (index, row) in target.rows.iter().enumerate() {
        let mut a = base.clone();
        let mut rhs = DVector::zeros(n);
        for e in row {
            let v = &fixed.factors[e.other * n..(e.other + 1) * n];
            let w = e.weight - w0;
            for i in 0..n {
                rhs[i] += e.weight * e.rating * v[i];
                for j in 0..n {
                    a[(i, j)] += w * v[i] * v[j];
                }
            }
        }
        let solution = a
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or(EmbeddingError::SingularSystem { side: name, index })?;
        if solution.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::SingularSystem { side: name, index });
        }
        target.factors[index * n..(index + 1) * n].copy_from_slice(solution.as_slice());
    }
    Ok(())
}

fn objective(users: &Side, items: &Side, n: usize, cfg: &WalsConfig) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    let mut observed_sq = 0.0;
    for (u, row) in users.rows.iter().enumerate() {
        let zu = &users.factors[u * n..(u + 1) * n];
        for e in row {
            let p = dot(zu, &items.factors[e.other * n..(e.other + 1) * n]);
            total += e.weight * (e.rating - p).powi(2);
            observed_sq += p * p;
        }
    }
    if cfg.unobserved_weight > 0.0 {
        let g = gram(items, n);
        let mut all_sq = 0.0;
        for zu in users.factors.chunks_exact(n) {
            let x = DVector::from_column_slice(zu);
            all_sq += (x.transpose() * &g * &x)[(0, 0)];
        }
        total += cfg.unobserved_weight * (all_sq - observed_sq);
    }
    let sq_norm = |f: &[f64]| f.iter().map(|x| x * x).sum::<f64>();
    total + cfg.regularization * (sq_norm(&users.factors) + sq_norm(&items.factors))
}
