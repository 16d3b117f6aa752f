use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embedding::{Embedding, EmbeddingStore};
use crate::error::{Error, Result};

/// Relative inertia change below which Lloyd iterations stop.
pub const KMEANS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: EmbeddingStore,
    pub k: usize,
    pub inertia: f64,
    /// Inertia after each assignment step, first entry from the seeding.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    /// Nearest-centroid index per row of `store`, ties to the lower index.
    pub fn labels(&self, store: &EmbeddingStore) -> Result<Vec<usize>> {
        Error::check_dim(self.centroids.dim(), store.dim())?;
        let centroids: Vec<Vec<f64>> = self.centroids.rows().iter().map(|c| c.to_vec()).collect();
        Ok(assign(store.rows(), &centroids).into_iter().map(|a| a.0).collect())
    }
}

/// Uniform sample of `min(n, |store|)` rows without replacement, kept in
/// store order.
pub fn subsample(store: &EmbeddingStore, n: usize, seed: u64) -> Result<EmbeddingStore> {
    if n == 0 {
        return Err(Error::invalid("subsample size must be at least 1"));
    }
    if n >= store.len() {
        return Ok(store.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, store.len(), n).into_vec();
    idx.sort_unstable();
    Ok(store.select(&idx))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and squared distance for every point. Ties go to the
/// lower centroid index.
fn assign(points: &[Embedding], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    points
        .par_iter()
        .map(|p| {
            centroids
                .iter()
                .enumerate()
                .map(|(c, cen)| (c, sq_dist(p, cen)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
        })
        .collect()
}

fn plus_plus_seed(points: &[Embedding], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            // Guard against rounding walking past the last positive weight.
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).expect("total > 0");
            }
            pick
        } else {
            // Every point coincides with a chosen centroid.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

/// k-means++ seeding followed by Lloyd iterations under squared Euclidean
/// distance. Empty clusters keep their previous centroid.
pub fn kmeans(store: &EmbeddingStore, k: usize, max_iters: usize, seed: u64) -> Result<ClusterModel> {
    if k == 0 || k > store.len() {
        return Err(Error::invalid(format!("k = {k} must be in 1..={}", store.len())));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    let points = store.rows();
    let dim = store.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seed(points, k, &mut rng);

    let mut assignment = assign(points, &centroids);
    let mut inertia: f64 = assignment.iter().map(|a| a.1).sum();
    let mut trace = vec![inertia];
    let mut iterations = 0;
    while iterations < max_iters && inertia > 0.0 {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        assignment = assign(points, &centroids);
        let next: f64 = assignment.iter().map(|a| a.1).sum();
        assert!(
            next <= inertia * (1.0 + 1e-12) + 1e-12,
            "k-means inertia increased from {inertia} to {next}"
        );
        let change = (inertia - next).abs() / inertia;
        inertia = next;
        trace.push(inertia);
        if change < KMEANS_TOLERANCE {
            break;
        }
    }

    let centroids = EmbeddingStore::from_parts(
        (0..k).map(|c| format!("centroid/{c}")).collect(),
        centroids.into_iter().map(Embedding::new).collect::<Result<_>>()?,
    )?;
    Ok(ClusterModel {
        centroids,
        k,
        inertia,
        inertia_trace: trace,
        iterations,
    })
}
