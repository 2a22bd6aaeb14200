use std::collections::BTreeSet;

use eagle_core::embedding::{k_nearest_neighbors, EmbeddingCatalog, EmbeddingError, EmbeddingVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force(query: &[f64], items: &[Vec<f64>], k: usize, exclude: &BTreeSet<u64>) -> Vec<(u64, f64)> {
    let mut all: Vec<(u64, f64)> = items
        .iter()
        .enumerate()
        .filter(|(i, _)| !exclude.contains(&(*i as u64)))
        .map(|(i, v)| {
            let d2: f64 = v.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (i as u64, d2.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn catalog(items: &[Vec<f64>], dim: usize) -> EmbeddingCatalog {
    EmbeddingCatalog::from_items(
        dim,
        items
            .iter()
            .enumerate()
            .map(|(i, v)| (i as u64, EmbeddingVector::new(v.clone()).unwrap())),
    )
    .unwrap()
}

/// Coordinates on a coarse grid so that distance ties are common.
fn random_items(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-4i32..=4) as f64 * 0.25).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn knn_matches_brute_force(seed in any::<u64>(), n in 1usize..400, dim in 1usize..6, k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = random_items(&mut rng, n, dim);
        let cat = catalog(&items, dim);
        let exclude: BTreeSet<u64> = (0..n as u64).filter(|_| rng.random_bool(0.1)).collect();
        for _ in 0..10 {
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = k_nearest_neighbors(&EmbeddingVector::new(q.clone()).unwrap(), &cat, k, &exclude);
            let available = n - exclude.len();
            if available < k {
                prop_assert_eq!(got.unwrap_err(), EmbeddingError::InsufficientItems { requested: k, available });
            } else {
                prop_assert_eq!(got.unwrap(), brute_force(&q, &items, k, &exclude));
            }
        }
    }
}

#[test]
fn knn_on_ten_thousand_items() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 8;
    let items: Vec<Vec<f64>> = (0..10_000)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let cat = catalog(&items, dim);
    let none = BTreeSet::new();
    for _ in 0..100 {
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = k_nearest_neighbors(&EmbeddingVector::new(q.clone()).unwrap(), &cat, 10, &none).unwrap();
        assert_eq!(got, brute_force(&q, &items, 10, &none));
    }
}
