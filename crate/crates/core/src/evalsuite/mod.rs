//! Offline evaluation over embedding stores: recall@k, separability,
//! clustering consistency, ranking consistency, bijective alignment, AUC.

mod retrieval;
mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::balancing::kmeans;
use crate::datasets::{GoldPair, GradedLabel};
use crate::embedding::EmbeddingStore;
use crate::error::{Error, Result};

pub use retrieval::{bijective_alignment, recall_at_k, RecallReport, RetrievalIndex, DEFAULT_KS};
pub use stats::{auc, nmi, ranking_consistency, separability, NmiScore, RankingConsistency, Separability, HISTOGRAM_BINS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Recall,
    Separability,
    Nmi,
    Ranking,
    Bijective,
    Auc,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Recall,
        Metric::Separability,
        Metric::Nmi,
        Metric::Ranking,
        Metric::Bijective,
        Metric::Auc,
    ];
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Metric::Recall => "recall",
            Metric::Separability => "separability",
            Metric::Nmi => "nmi",
            Metric::Ranking => "ranking",
            Metric::Bijective => "bijective",
            Metric::Auc => "auc",
        };
        f.write_str(s)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric `{s}`")))
    }
}

/// Parses `all` or a comma-separated metric list.
pub fn parse_metrics(s: &str) -> Result<BTreeSet<Metric>> {
    if s.trim() == "all" {
        return Ok(Metric::ALL.into_iter().collect());
    }
    s.split(',').map(|m| m.trim().parse()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub metrics: BTreeSet<Metric>,
    /// Clusters per side for the NMI labelings.
    pub nmi_clusters: usize,
    pub kmeans_iters: usize,
    /// Prefix length for the top-k overlap of graded rankings.
    pub topk: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            metrics: Metric::ALL.into_iter().collect(),
            nmi_clusters: 8,
            kmeans_iters: 100,
            topk: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub queries: usize,
    pub targets: usize,
    /// Keyed by k.
    pub recall: BTreeMap<String, f64>,
    pub separability: Option<Separability>,
    pub nmi: Option<NmiScore>,
    /// Mean over queries with graded labels.
    pub kendall_tau: Option<f64>,
    pub topk_overlap: Option<f64>,
    pub bijective_accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub warnings: Vec<String>,
}

pub fn gold_map(pairs: &[GoldPair]) -> Result<BTreeMap<String, String>> {
    let mut gold = BTreeMap::new();
    for p in pairs {
        if gold.insert(p.query.clone(), p.target.clone()).is_some() {
            return Err(Error::DuplicateId(p.query.clone()));
        }
    }
    Ok(gold)
}

/// Positive similarities (query, gold target) and negatives (query, every
/// other target).
pub fn pair_similarities(
    queries: &EmbeddingStore,
    targets: &EmbeddingStore,
    gold: &BTreeMap<String, String>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let index = RetrievalIndex::new(targets);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (q, t) in gold {
        let qv = queries.get(q).ok_or_else(|| Error::UnknownId(q.clone()))?;
        let gi = targets.position(t);
        for (i, s) in index.scores(qv)?.into_iter().enumerate() {
            if Some(i) == gi {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
    }
    Ok((pos, neg))
}

/// Mean Kendall τ and top-k overlap between each query's model ranking of
/// its graded targets and the ranking by graded score.
fn graded_consistency(
    queries: &EmbeddingStore,
    targets: &EmbeddingStore,
    orders: &[GradedLabel],
    k: usize,
) -> Result<Option<RankingConsistency>> {
    let mut by_query: BTreeMap<&str, Vec<&GradedLabel>> = BTreeMap::new();
    for o in orders {
        by_query.entry(&o.query).or_default().push(o);
    }
    let (mut tau, mut overlap, mut n) = (0.0, 0.0, 0);
    for (q, labels) in by_query {
        if labels.len() < 2 {
            continue;
        }
        let qv = queries.get(q).ok_or_else(|| Error::UnknownId(q.to_string()))?;
        let mut scored = Vec::new();
        for l in &labels {
            let tv = targets.get(&l.target).ok_or_else(|| Error::UnknownId(l.target.clone()))?;
            scored.push((l.target.as_str(), l.score, crate::embedding::cosine(qv, tv)?));
        }
        let rank_by = |key: fn(&(&str, f64, f64)) -> f64| {
            let mut v = scored.clone();
            v.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.0.cmp(b.0)));
            v.into_iter().map(|x| x.0).collect::<Vec<_>>()
        };
        let r = ranking_consistency(&rank_by(|x| x.1), &rank_by(|x| x.2), k)?;
        tau += r.kendall_tau;
        overlap += r.topk_overlap;
        n += 1;
    }
    Ok((n > 0).then(|| RankingConsistency {
        kendall_tau: tau / n as f64,
        topk_overlap: overlap / n as f64,
    }))
}

/// Runs every metric in `cfg.metrics`. Metrics whose inputs are missing
/// are left empty with a warning.
pub fn evaluate(
    queries: &EmbeddingStore,
    targets: &EmbeddingStore,
    pairs: &[GoldPair],
    orders: Option<&[GradedLabel]>,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    let gold = gold_map(pairs)?;
    let mut report = MetricReport {
        queries: queries.len(),
        targets: targets.len(),
        recall: BTreeMap::new(),
        separability: None,
        nmi: None,
        kendall_tau: None,
        topk_overlap: None,
        bijective_accuracy: None,
        auc: None,
        warnings: Vec::new(),
    };
    let wants = |m: Metric| cfg.metrics.contains(&m);
    if wants(Metric::Recall) {
        let r = recall_at_k(queries, targets, &gold, &cfg.ks)?;
        for k in &r.clamped {
            report.warnings.push(format!("k = {k} exceeds {} targets; clamped", targets.len()));
        }
        if !r.missing_gold.is_empty() {
            report
                .warnings
                .push(format!("{} gold targets missing from the target store", r.missing_gold.len()));
        }
        report.recall = r.recall.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    }
    if wants(Metric::Separability) || wants(Metric::Auc) {
        let (pos, neg) = pair_similarities(queries, targets, &gold)?;
        if pos.is_empty() || neg.is_empty() {
            report.warnings.push("separability and auc need positive and negative pairs".into());
        } else {
            if wants(Metric::Separability) {
                report.separability = Some(separability(&pos, &neg)?);
            }
            if wants(Metric::Auc) {
                let labels: Vec<bool> = pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect();
                let scores: Vec<f64> = pos.into_iter().chain(neg).collect();
                report.auc = Some(auc(&scores, &labels)?);
            }
        }
    }
    if wants(Metric::Nmi) {
        let present: Vec<(usize, usize)> = gold
            .iter()
            .filter_map(|(q, t)| Some((queries.position(q)?, targets.position(t)?)))
            .collect();
        let k = cfg.nmi_clusters.min(present.len());
        if k == 0 {
            report.warnings.push("nmi needs at least one resolvable gold pair".into());
        } else {
            let qs = queries.select(&present.iter().map(|p| p.0).collect::<Vec<_>>());
            let ts = targets.select(&present.iter().map(|p| p.1).collect::<Vec<_>>());
            let a = kmeans(&qs, k, cfg.kmeans_iters, cfg.seed)?.labels(&qs)?;
            let b = kmeans(&ts, k, cfg.kmeans_iters, cfg.seed)?.labels(&ts)?;
            report.nmi = Some(nmi(&a, &b)?);
        }
    }
    if wants(Metric::Ranking) {
        match orders.map(|o| graded_consistency(queries, targets, o, cfg.topk)).transpose()? {
            Some(Some(r)) => {
                report.kendall_tau = Some(r.kendall_tau);
                report.topk_overlap = Some(r.topk_overlap);
            }
            _ => report.warnings.push("ranking consistency needs graded labels".into()),
        }
    }
    if wants(Metric::Bijective) {
        if queries.len() == targets.len() && gold.len() == queries.len() {
            report.bijective_accuracy = Some(bijective_alignment(queries, targets, &gold)?);
        } else {
            report.warnings.push("bijective alignment needs one gold pair per query and target".into());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Embedding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_store(rng: &mut ChaCha8Rng, prefix: &str, n: usize, d: usize) -> EmbeddingStore {
        EmbeddingStore::from_parts(
            (0..n).map(|i| format!("{prefix}{i:02}")).collect(),
            (0..n)
                .map(|_| Embedding::new((0..d).map(|_| rng.sample(StandardNormal)).collect()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn rotate(store: &EmbeddingStore, rot: &[Vec<f64>]) -> EmbeddingStore {
        EmbeddingStore::from_parts(
            store.ids().to_vec(),
            store
                .rows()
                .iter()
                .map(|r| Embedding::new(rot.iter().map(|row| crate::tensor::dot(row, r)).collect()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let p = crate::tensor::dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let n = crate::tensor::norm(&v);
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
        basis
    }

    #[test]
    fn retrieval_metrics_invariant_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let q = random_store(&mut rng, "q", 30, 8);
            let t = random_store(&mut rng, "t", 30, 8);
            let pairs: Vec<GoldPair> = (0..30).map(|i| GoldPair::new(format!("q{i:02}"), format!("t{i:02}"))).collect();
            let orders: Vec<GradedLabel> = (0..30)
                .flat_map(|i| {
                    (0..4).map(move |j| GradedLabel {
                        query: format!("q{i:02}"),
                        target: format!("t{:02}", (i + j) % 30),
                        score: 1.0 - j as f64 * 0.2,
                    })
                })
                .collect();
            let cfg = EvalConfig {
                metrics: [Metric::Recall, Metric::Ranking, Metric::Bijective, Metric::Auc].into(),
                ..Default::default()
            };
            let rot = random_rotation(&mut rng, 8);
            let a = evaluate(&q, &t, &pairs, Some(&orders), &cfg).unwrap();
            let b = evaluate(&rotate(&q, &rot), &rotate(&t, &rot), &pairs, Some(&orders), &cfg).unwrap();
            assert_eq!(a.recall, b.recall);
            assert_eq!(a.bijective_accuracy, b.bijective_accuracy);
            assert_eq!(a.kendall_tau, b.kendall_tau);
            assert!((a.auc.unwrap() - b.auc.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn full_report_on_identical_stores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_store(&mut rng, "x", 20, 6);
        let t = EmbeddingStore::from_parts(
            (0..20).map(|i| format!("y{i:02}")).collect(),
            q.rows().to_vec(),
        )
        .unwrap();
        let pairs: Vec<GoldPair> = (0..20).map(|i| GoldPair::new(format!("x{i:02}"), format!("y{i:02}"))).collect();
        let r = evaluate(&q, &t, &pairs, None, &EvalConfig::default()).unwrap();
        assert_eq!(r.recall["1"], 1.0);
        assert_eq!(r.bijective_accuracy, Some(1.0));
        assert_eq!(r.auc, Some(1.0));
        assert_eq!(r.nmi.unwrap().nmi, 1.0);
        assert!(r.kendall_tau.is_none() && !r.warnings.is_empty());
        assert!(r.separability.unwrap().gap > 0.5);
    }

    #[test]
    fn metric_lists_parse() {
        assert_eq!(parse_metrics("all").unwrap().len(), 6);
        assert_eq!(parse_metrics("recall, auc").unwrap().len(), 2);
        assert!(parse_metrics("recall,bogus").is_err());
    }
}
