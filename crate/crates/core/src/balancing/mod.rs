//! Adaptive sampling weights for multi-source training.
//!
//! Each training set and each benchmark is subsampled and clustered; the
//! centroid cosine matrix for every (training set, benchmark) cell is
//! reduced to one score with entropic optimal transport, and the row means
//! of the resulting matrix go through a softmax.

mod kmeans;
mod sinkhorn;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Modality;
use crate::embedding::{pairwise_similarity, Embedding, EmbeddingStore};
use crate::error::{Error, Result};

pub use kmeans::{kmeans, subsample, ClusterModel, KMEANS_TOLERANCE};
pub use sinkhorn::{
    sinkhorn_plan, sinkhorn_scalar, SinkhornScore, TransportPlan, DEFAULT_EPSILON, DEFAULT_ITERS, SINKHORN_TOLERANCE,
};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_K: usize = 16;

/// Picks the representation used for balancing: the fused embedding when
/// present, otherwise one unimodal embedding by priority vision, text, audio.
pub fn fusion_first_select(available: &BTreeMap<Modality, Embedding>, fused: Option<&Embedding>) -> Result<Embedding> {
    if let Some(f) = fused {
        return Ok(f.clone());
    }
    [Modality::Vision, Modality::Text, Modality::Audio]
        .iter()
        .find_map(|m| available.get(m).cloned())
        .ok_or(Error::Empty("item representations"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub benchmarks: Vec<String>,
    /// Rows are training sets, columns benchmarks.
    pub sim_matrix: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub temperature: f64,
    /// Cells whose Sinkhorn iteration hit the cap before converging.
    #[serde(default)]
    pub unconverged_cells: usize,
}

impl BalanceReport {
    pub fn weight_of(&self, train: &str) -> Option<f64> {
        self.train.iter().position(|t| t == train).map(|i| self.weights[i])
    }
}

/// Softmax over the row means of `sim_matrix`, divided by `temperature`.
pub fn compute_weights(sim_matrix: &[Vec<f64>], temperature: f64) -> Result<BalanceReport> {
    if sim_matrix.is_empty() || sim_matrix.iter().any(|r| r.is_empty()) {
        return Err(Error::Empty("similarity matrix"));
    }
    let cols = sim_matrix[0].len();
    if let Some(r) = sim_matrix.iter().find(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch {
            expected: cols,
            actual: r.len(),
        });
    }
    if sim_matrix.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity matrix"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let logits: Vec<f64> = sim_matrix
        .iter()
        .map(|r| r.iter().sum::<f64>() / cols as f64 / temperature)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(BalanceReport {
        train: Vec::new(),
        benchmarks: Vec::new(),
        sim_matrix: sim_matrix.to_vec(),
        weights: exps.iter().map(|e| e / total).collect(),
        temperature,
        unconverged_cells: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceConfig {
    /// Rows kept per set before clustering.
    pub sample: usize,
    /// Clusters per set; clamped to the sample size.
    pub k: usize,
    pub kmeans_iters: usize,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            sample: 10_000,
            k: DEFAULT_K,
            kmeans_iters: 100,
            epsilon: DEFAULT_EPSILON,
            sinkhorn_iters: DEFAULT_ITERS,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }
}

/// Centroids of one set. Every set uses the same seed, so identical stores
/// produce identical clusterings.
pub fn cluster_set(store: &EmbeddingStore, cfg: &BalanceConfig) -> Result<ClusterModel> {
    if store.is_empty() {
        return Err(Error::Empty("embedding set"));
    }
    let sample = subsample(store, cfg.sample, cfg.seed)?;
    kmeans(&sample, cfg.k.min(sample.len()), cfg.kmeans_iters, cfg.seed)
}

/// Full pipeline over named training sets and benchmarks.
pub fn balance(
    train: &[(String, EmbeddingStore)],
    benchmarks: &[(String, EmbeddingStore)],
    cfg: &BalanceConfig,
) -> Result<BalanceReport> {
    if train.is_empty() || benchmarks.is_empty() {
        return Err(Error::invalid("balancing needs at least one training set and one benchmark"));
    }
    let dim = train[0].1.dim();
    for (_, s) in train.iter().chain(benchmarks) {
        Error::check_dim(dim, s.dim())?;
    }
    let cluster_all = |sets: &[(String, EmbeddingStore)]| -> Result<Vec<ClusterModel>> {
        sets.par_iter().map(|(_, s)| cluster_set(s, cfg)).collect()
    };
    let train_clusters = cluster_all(train)?;
    let bench_clusters = cluster_all(benchmarks)?;

    let cells: Vec<(usize, usize)> = (0..train.len())
        .flat_map(|i| (0..benchmarks.len()).map(move |j| (i, j)))
        .collect();
    let scores: Vec<SinkhornScore> = cells
        .par_iter()
        .map(|&(i, j)| {
            let c = pairwise_similarity(&train_clusters[i].centroids, &bench_clusters[j].centroids)?;
            sinkhorn_scalar(&c.values, cfg.epsilon, cfg.sinkhorn_iters)
        })
        .collect::<Result<_>>()?;

    let sim: Vec<Vec<f64>> = scores.chunks(benchmarks.len()).map(|r| r.iter().map(|s| s.score).collect()).collect();
    let mut report = compute_weights(&sim, cfg.temperature)?;
    report.train = train.iter().map(|t| t.0.clone()).collect();
    report.benchmarks = benchmarks.iter().map(|b| b.0.clone()).collect();
    report.unconverged_cells = scores.iter().filter(|s| !s.converged).count();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn fusion_first_priority() {
        let mut avail = BTreeMap::new();
        avail.insert(Modality::Audio, emb(&[3.0]));
        avail.insert(Modality::Vision, emb(&[1.0]));
        let fused = emb(&[9.0]);
        assert_eq!(fusion_first_select(&avail, Some(&fused)).unwrap(), fused);
        assert_eq!(fusion_first_select(&avail, None).unwrap(), emb(&[1.0]));
        let text_only: BTreeMap<_, _> = [(Modality::Text, emb(&[2.0]))].into();
        assert_eq!(fusion_first_select(&text_only, None).unwrap(), emb(&[2.0]));
        assert!(fusion_first_select(&BTreeMap::new(), None).is_err());
    }

    #[test]
    fn weight_examples() {
        let r = compute_weights(&[vec![0.3, 0.5], vec![0.3, 0.5], vec![0.3, 0.5]], 0.1).unwrap();
        for w in &r.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        let r = compute_weights(&[vec![1.0], vec![0.0]], 1.0).unwrap();
        assert!((r.weights[0] - 0.73105858).abs() < 1e-8);
        assert!((r.weights[1] - 0.26894142).abs() < 1e-8);
        let r = compute_weights(&[vec![1.0], vec![-1.0], vec![0.2]], 1e9).unwrap();
        assert!(r.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn weight_errors() {
        assert!(compute_weights(&[], 0.1).is_err());
        assert!(compute_weights(&[vec![1.0]], 0.0).is_err());
        assert!(compute_weights(&[vec![1.0], vec![1.0, 2.0]], 0.1).is_err());
        assert!(compute_weights(&[vec![f64::NAN]], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn weights_form_a_distribution_and_ignore_shifts(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..6),
            shift in -5.0f64..5.0,
            temp in 0.05f64..5.0,
        ) {
            let a = compute_weights(&rows, temp).unwrap();
            let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
            let b = compute_weights(&shifted, temp).unwrap();
            prop_assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.weights.iter().all(|&w| w > 0.0));
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
