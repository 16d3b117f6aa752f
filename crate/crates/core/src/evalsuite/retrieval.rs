use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingStore;
use crate::error::{Error, Result};
use crate::tensor::dot;

pub const DEFAULT_KS: [usize; 5] = [1, 10, 25, 50, 100];

/// Exact brute-force cosine index over a target store.
#[derive(Debug, Clone)]
pub struct RetrievalIndex<'a> {
    pub targets: &'a EmbeddingStore,
    norms: Vec<f64>,
}

impl<'a> RetrievalIndex<'a> {
    pub fn new(targets: &'a EmbeddingStore) -> Self {
        let norms = targets.rows().iter().map(|r| r.norm()).collect();
        Self { targets, norms }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Cosine of `q` against every target; zero-norm pairs score 0.
    pub fn scores(&self, q: &[f64]) -> Result<Vec<f64>> {
        if !self.is_empty() {
            Error::check_dim(self.targets.dim(), q.len())?;
        }
        let nq = crate::tensor::norm(q);
        Ok(self
            .targets
            .rows()
            .iter()
            .zip(&self.norms)
            .map(|(t, &nt)| {
                if nq == 0.0 || nt == 0.0 {
                    0.0
                } else {
                    (dot(q, t) / (nq * nt)).clamp(-1.0, 1.0)
                }
            })
            .collect())
    }

    /// Retrieval order: descending score, ties by ascending id.
    fn before(&self, scores: &[f64], a: usize, b: usize) -> Ordering {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| self.targets.id(a).cmp(self.targets.id(b)))
    }

    /// Zero-based position target `i` would take in the full ranking.
    pub fn rank_of(&self, scores: &[f64], i: usize) -> usize {
        (0..self.len()).filter(|&j| self.before(scores, j, i) == Ordering::Less).count()
    }

    pub fn nearest(&self, scores: &[f64]) -> Option<usize> {
        (0..self.len()).min_by(|&a, &b| self.before(scores, a, b))
    }

    /// The `k` best targets as `(id, score)`, best first.
    pub fn top_k(&self, q: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
        let scores = self.scores(q)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.before(&scores, a, b));
        Ok(order
            .into_iter()
            .take(k)
            .map(|i| (self.targets.id(i).to_string(), scores[i]))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Recall per requested k (after clamping).
    pub recall: BTreeMap<usize, f64>,
    /// Requested ks larger than the target store.
    pub clamped: Vec<usize>,
    /// Queries whose gold target is absent from the store; they count as
    /// misses.
    pub missing_gold: Vec<String>,
}

/// Fraction of queries whose gold target ranks within the top k.
pub fn recall_at_k(
    queries: &EmbeddingStore,
    targets: &EmbeddingStore,
    gold: &BTreeMap<String, String>,
    ks: &[usize],
) -> Result<RecallReport> {
    if gold.is_empty() {
        return Err(Error::Empty("gold pairs"));
    }
    if targets.is_empty() {
        return Err(Error::Empty("target store"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("ks must be non-empty and positive"));
    }
    let index = RetrievalIndex::new(targets);
    let ranks: Vec<Option<usize>> = gold
        .par_iter()
        .map(|(q, t)| {
            let qv = queries.get(q).ok_or_else(|| Error::UnknownId(q.clone()))?;
            let Some(ti) = targets.position(t) else {
                return Ok(None);
            };
            let scores = index.scores(qv)?;
            Ok(Some(index.rank_of(&scores, ti)))
        })
        .collect::<Result<_>>()?;
    let missing_gold = gold
        .iter()
        .zip(&ranks)
        .filter(|(_, r)| r.is_none())
        .map(|((q, _), _)| q.clone())
        .collect();
    let mut recall = BTreeMap::new();
    let mut clamped = Vec::new();
    for &k in ks {
        let eff = if k > targets.len() {
            clamped.push(k);
            targets.len()
        } else {
            k
        };
        let hits = ranks.iter().filter(|r| r.is_some_and(|r| r < eff)).count();
        recall.insert(k, hits as f64 / gold.len() as f64);
    }
    Ok(RecallReport {
        recall,
        clamped,
        missing_gold,
    })
}

/// Round-trip accuracy: query → nearest target → nearest query must return
/// to the start, and the forward hit must be the gold target.
pub fn bijective_alignment(
    queries: &EmbeddingStore,
    targets: &EmbeddingStore,
    gold: &BTreeMap<String, String>,
) -> Result<f64> {
    if queries.len() != targets.len() || gold.len() != queries.len() {
        return Err(Error::invalid(format!(
            "bijective alignment needs equal sizes: {} queries, {} targets, {} gold pairs",
            queries.len(),
            targets.len(),
            gold.len()
        )));
    }
    if queries.is_empty() {
        return Err(Error::Empty("query store"));
    }
    let distinct: HashSet<&String> = gold.values().collect();
    if distinct.len() != gold.len() {
        return Err(Error::invalid("gold pairing is not bijective"));
    }
    let forward = RetrievalIndex::new(targets);
    let backward = RetrievalIndex::new(queries);
    let hits: Vec<bool> = gold
        .par_iter()
        .map(|(q, t)| {
            let qv = queries.get(q).ok_or_else(|| Error::UnknownId(q.clone()))?;
            if targets.position(t).is_none() {
                return Err(Error::UnknownId(t.clone()));
            }
            let ti = forward.nearest(&forward.scores(qv)?).expect("non-empty");
            let back = backward.nearest(&backward.scores(targets.row(ti))?).expect("non-empty");
            Ok(targets.id(ti) == t && queries.id(back) == q)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}
