//! Dynamic hard-negative mining.
//!
//! Every non-positive (query, target) combination is scored by cosine and
//! merged with the positives into a labelled score set. The F1-optimal
//! decision threshold `λ*` over that set splits presumed false negatives
//! (scores at or above `λ*`) from hard negatives (the highest scores below
//! it).

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::GoldPair;
use crate::embedding::{cosine_flagged, EmbeddingStore};
use crate::error::{Error, Result};

/// Offset used for the sweep's outer candidate thresholds.
pub const SWEEP_EPSILON: f64 = 1e-6;
pub const DEFAULT_HARD_NEGATIVES: usize = 8;
pub const DEFAULT_PAIR_CAP: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub score: f64,
    pub positive: bool,
    pub query: String,
    pub target: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledScoreSet {
    pub scores: Vec<LabeledScore>,
    /// Pairs whose cosine was forced to 0 by a zero-norm embedding.
    pub zero_norm: usize,
    /// Negatives that existed before the cap was applied.
    pub negatives_total: usize,
}

impl LabeledScoreSet {
    pub fn counts(&self) -> (usize, usize) {
        let pos = self.scores.iter().filter(|s| s.positive).count();
        (pos, self.scores.len() - pos)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PoolConfig {
    /// Upper bound on scored negatives; larger pools are uniformly subsampled.
    pub cap: usize,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            cap: DEFAULT_PAIR_CAP,
            seed: 0,
        }
    }
}

/// Scores every positive pair and every query × target combination that is
/// not a positive. Queries and targets are taken from the positive pairs in
/// order of first appearance; all ids are looked up in `store`.
pub fn build_negative_pool(positives: &[GoldPair], store: &EmbeddingStore, cfg: PoolConfig) -> Result<LabeledScoreSet> {
    let mut queries: Vec<&str> = Vec::new();
    let mut targets: Vec<&str> = Vec::new();
    let mut seen_q = HashSet::new();
    let mut seen_t = HashSet::new();
    let mut positive: HashMap<&str, HashSet<&str>> = HashMap::new();
    for p in positives {
        for id in [&p.query, &p.target] {
            if store.get(id).is_none() {
                return Err(Error::UnknownId(id.clone()));
            }
        }
        if seen_q.insert(p.query.as_str()) {
            queries.push(&p.query);
        }
        if seen_t.insert(p.target.as_str()) {
            targets.push(&p.target);
        }
        positive.entry(&p.query).or_default().insert(&p.target);
    }
    let emb = |id: &str| store.get(id).expect("checked above");

    let mut set = LabeledScoreSet::default();
    let mut seen_pairs = HashSet::new();
    for p in positives {
        if !seen_pairs.insert((p.query.as_str(), p.target.as_str())) {
            continue;
        }
        let (s, zero) = cosine_flagged(emb(&p.query), emb(&p.target))?;
        set.zero_norm += zero as usize;
        set.scores.push(LabeledScore {
            score: s,
            positive: true,
            query: p.query.clone(),
            target: p.target.clone(),
        });
    }

    // Negative targets per query, in target order.
    let per_query: Vec<Vec<usize>> = queries
        .iter()
        .map(|q| {
            let pos = &positive[q];
            (0..targets.len()).filter(|&j| !pos.contains(targets[j])).collect()
        })
        .collect();
    let total: usize = per_query.iter().map(Vec::len).sum();
    set.negatives_total = total;

    // Optional uniform subsample, expressed as a keep-mask per query.
    let keep: Option<Vec<HashSet<usize>>> = (total > cfg.cap).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut chosen = rand::seq::index::sample(&mut rng, total, cfg.cap).into_vec();
        chosen.sort_unstable();
        let mut masks = vec![HashSet::new(); queries.len()];
        let mut offset = 0;
        let mut qi = 0;
        for k in chosen {
            while k >= offset + per_query[qi].len() {
                offset += per_query[qi].len();
                qi += 1;
            }
            masks[qi].insert(k - offset);
        }
        masks
    });

    let scored: Vec<Result<(Vec<LabeledScore>, usize)>> = queries
        .par_iter()
        .enumerate()
        .map(|(qi, &q)| {
            let mut out = Vec::new();
            let mut zero = 0;
            for (k, &j) in per_query[qi].iter().enumerate() {
                if keep.as_ref().is_some_and(|m| !m[qi].contains(&k)) {
                    continue;
                }
                let (s, z) = cosine_flagged(emb(q), emb(targets[j]))?;
                zero += z as usize;
                out.push(LabeledScore {
                    score: s,
                    positive: false,
                    query: q.to_string(),
                    target: targets[j].to_string(),
                });
            }
            Ok((out, zero))
        })
        .collect();
    for r in scored {
        let (mut v, z) = r?;
        set.scores.append(&mut v);
        set.zero_norm += z;
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub lambda: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweepResult {
    pub lambda_star: f64,
    pub f1_at_star: f64,
    /// Candidate thresholds in ascending order.
    pub curve: Vec<CurvePoint>,
}

fn prf(tp: usize, fp: usize, positives: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / positives as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Finds `λ* = argmax F1(λ)` for the rule "predict positive iff s ≥ λ".
///
/// Candidates are the midpoints between adjacent distinct scores plus one
/// threshold just below the minimum and one just above the maximum, which
/// covers every distinct prediction on the data. Ties go to the largest λ.
pub fn sweep_threshold(set: &LabeledScoreSet) -> Result<ThresholdSweepResult> {
    let (pos, neg) = set.counts();
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "threshold sweep needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = set.scores.iter().map(|s| (s.score, s.positive)).collect();
    if sorted.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFinite("similarity score"));
    }
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut curve = Vec::new();
    let top = sorted[0].0;
    let (p, r, f) = prf(0, 0, pos);
    curve.push(CurvePoint {
        lambda: top + SWEEP_EPSILON,
        precision: p,
        recall: r,
        f1: f,
    });
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let lambda = match sorted.get(i) {
            Some(&(next, _)) => 0.5 * (v + next),
            None => v - SWEEP_EPSILON,
        };
        let (p, r, f) = prf(tp, fp, pos);
        curve.push(CurvePoint {
            lambda,
            precision: p,
            recall: r,
            f1: f,
        });
    }
    // Descending-λ scan: the first strict maximum is the largest tied λ.
    let best = curve
        .iter()
        .fold(None::<&CurvePoint>, |best, c| match best {
            Some(b) if b.f1 >= c.f1 => Some(b),
            _ => Some(c),
        })
        .copied()
        .expect("curve is non-empty");
    curve.reverse();
    Ok(ThresholdSweepResult {
        lambda_star: best.lambda,
        f1_at_star: best.f1,
        curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTarget {
    pub target: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardNegativePool {
    pub lambda_star: f64,
    pub m: usize,
    /// Per query, sub-threshold negatives sorted by descending score.
    pub per_query: BTreeMap<String, Vec<ScoredTarget>>,
}

impl HardNegativePool {
    pub fn targets(&self, query: &str) -> impl Iterator<Item = &str> {
        self.per_query
            .get(query)
            .into_iter()
            .flatten()
            .map(|s| s.target.as_str())
    }
}

/// Keeps, per query, the `m` highest-scoring negatives strictly below
/// `lambda_star`. Negatives at or above it are discarded as likely false
/// negatives.
pub fn select_hard_negatives(set: &LabeledScoreSet, lambda_star: f64, m: usize) -> Result<HardNegativePool> {
    if m == 0 {
        return Err(Error::invalid("m must be at least 1"));
    }
    let mut per_query: BTreeMap<String, Vec<ScoredTarget>> = BTreeMap::new();
    for s in &set.scores {
        let list = per_query.entry(s.query.clone()).or_default();
        if !s.positive && s.score < lambda_star {
            list.push(ScoredTarget {
                target: s.target.clone(),
                score: s.score,
            });
        }
    }
    for list in per_query.values_mut() {
        list.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.target.cmp(&b.target)));
        list.truncate(m);
    }
    Ok(HardNegativePool {
        lambda_star,
        m,
        per_query,
    })
}

/// Full mining pass: pool, sweep, selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningOutcome {
    pub sweep: ThresholdSweepResult,
    pub pool: HardNegativePool,
    pub positives: usize,
    pub negatives_scored: usize,
    pub negatives_total: usize,
    pub zero_norm: usize,
}

pub fn mine(positives: &[GoldPair], store: &EmbeddingStore, m: usize, cfg: PoolConfig) -> Result<MiningOutcome> {
    let set = build_negative_pool(positives, store, cfg)?;
    let sweep = sweep_threshold(&set)?;
    let pool = select_hard_negatives(&set, sweep.lambda_star, m)?;
    let (p, n) = set.counts();
    Ok(MiningOutcome {
        sweep,
        pool,
        positives: p,
        negatives_scored: n,
        negatives_total: set.negatives_total,
        zero_norm: set.zero_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Embedding;
    use rand::Rng;

    fn set_of(pos: &[f64], neg: &[f64]) -> LabeledScoreSet {
        let mk = |s: f64, positive: bool, i: usize| LabeledScore {
            score: s,
            positive,
            query: "q".into(),
            target: format!("{}{i}", if positive { "p" } else { "n" }),
        };
        LabeledScoreSet {
            scores: pos
                .iter()
                .enumerate()
                .map(|(i, &s)| mk(s, true, i))
                .chain(neg.iter().enumerate().map(|(i, &s)| mk(s, false, i)))
                .collect(),
            ..Default::default()
        }
    }

    /// Brute force: F1 at every score value and at ±ε around it, largest λ on ties.
    fn oracle(set: &LabeledScoreSet) -> (f64, f64) {
        let pos = set.scores.iter().filter(|s| s.positive).count();
        let mut cands: Vec<f64> = set
            .scores
            .iter()
            .flat_map(|s| [s.score - SWEEP_EPSILON, s.score, s.score + SWEEP_EPSILON])
            .collect();
        cands.sort_by(|a, b| b.total_cmp(a));
        let mut best = (f64::NAN, -1.0);
        for lambda in cands {
            let tp = set.scores.iter().filter(|s| s.positive && s.score >= lambda).count();
            let fp = set.scores.iter().filter(|s| !s.positive && s.score >= lambda).count();
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = tp as f64 / pos as f64;
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            if f1 > best.1 {
                best = (lambda, f1);
            }
        }
        best
    }

    fn predicted(set: &LabeledScoreSet, lambda: f64) -> usize {
        set.scores.iter().filter(|s| s.score >= lambda).count()
    }

    #[test]
    fn worked_example() {
        let set = set_of(&[0.9, 0.6], &[0.7, 0.1]);
        let r = sweep_threshold(&set).unwrap();
        assert!((r.f1_at_star - 0.8).abs() < 1e-12);
        assert!(r.lambda_star > 0.1 && r.lambda_star <= 0.6);
    }

    #[test]
    fn separable_and_inverted_cases() {
        let r = sweep_threshold(&set_of(&[0.9], &[0.1])).unwrap();
        assert_eq!(r.f1_at_star, 1.0);
        assert!(r.lambda_star > 0.1 && r.lambda_star <= 0.9);
        let r = sweep_threshold(&set_of(&[0.2], &[0.8])).unwrap();
        assert!((r.f1_at_star - 2.0 / 3.0).abs() < 1e-12);
        assert!(r.lambda_star < 0.2);
    }

    #[test]
    fn one_class_is_an_error() {
        assert!(sweep_threshold(&set_of(&[0.3, 0.4], &[])).is_err());
        assert!(sweep_threshold(&set_of(&[], &[0.3])).is_err());
    }

    #[test]
    fn sweep_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(2..=50);
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for i in 0..n {
                // Coarse grid forces ties.
                let s = (rng.random_range(-20..=20) as f64) / 20.0;
                if i == 0 || (i != 1 && rng.random_bool(0.4)) { pos.push(s) } else { neg.push(s) }
            }
            let set = set_of(&pos, &neg);
            let r = sweep_threshold(&set).unwrap();
            let (ol, of1) = oracle(&set);
            assert_eq!(r.f1_at_star, of1);
            assert_eq!(predicted(&set, r.lambda_star), predicted(&set, ol));
            assert!(r.curve.iter().all(|c| c.f1 <= r.f1_at_star));
        }
    }

    fn store(rows: &[(&str, [f64; 2])]) -> EmbeddingStore {
        EmbeddingStore::from_parts(
            rows.iter().map(|r| r.0.to_string()).collect(),
            rows.iter().map(|r| Embedding::new(r.1.to_vec()).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn pool_counts() {
        let s = store(&[
            ("q1", [1.0, 0.0]),
            ("q2", [0.0, 1.0]),
            ("q3", [1.0, 1.0]),
            ("t1", [1.0, 0.1]),
            ("t2", [0.1, 1.0]),
            ("t3", [1.0, 0.9]),
        ]);
        let two = [GoldPair::new("q1", "t1"), GoldPair::new("q2", "t2")];
        assert_eq!(build_negative_pool(&two, &s, PoolConfig::default()).unwrap().counts(), (2, 2));
        let one = [GoldPair::new("q1", "t1")];
        assert_eq!(build_negative_pool(&one, &s, PoolConfig::default()).unwrap().counts(), (1, 0));
        let three = [GoldPair::new("q1", "t1"), GoldPair::new("q2", "t2"), GoldPair::new("q3", "t3")];
        assert_eq!(build_negative_pool(&three, &s, PoolConfig::default()).unwrap().counts(), (3, 6));
        let bad = [GoldPair::new("q1", "zz")];
        assert!(matches!(build_negative_pool(&bad, &s, PoolConfig::default()), Err(Error::UnknownId(_))));
    }

    #[test]
    fn cap_subsamples_negatives_deterministically() {
        let s = store(&[
            ("q1", [1.0, 0.0]),
            ("q2", [0.0, 1.0]),
            ("q3", [1.0, 1.0]),
            ("t1", [1.0, 0.1]),
            ("t2", [0.1, 1.0]),
            ("t3", [1.0, 0.9]),
        ]);
        let three = [GoldPair::new("q1", "t1"), GoldPair::new("q2", "t2"), GoldPair::new("q3", "t3")];
        let cfg = PoolConfig { cap: 4, seed: 5 };
        let a = build_negative_pool(&three, &s, cfg).unwrap();
        assert_eq!(a.counts(), (3, 4));
        assert_eq!(a.negatives_total, 6);
        assert_eq!(a, build_negative_pool(&three, &s, cfg).unwrap());
    }

    #[test]
    fn hard_negatives_below_threshold() {
        let set = set_of(&[0.9], &[0.7, 0.1]);
        let pool = select_hard_negatives(&set, 0.55, 5).unwrap();
        let got: Vec<_> = pool.targets("q").collect();
        assert_eq!(got, vec!["n1"]);

        let pool = select_hard_negatives(&set_of(&[0.9], &[0.7, 0.8]), 0.55, 5).unwrap();
        assert_eq!(pool.targets("q").count(), 0);

        let negs: Vec<f64> = (0..10).map(|i| i as f64 / 20.0).collect();
        let pool = select_hard_negatives(&set_of(&[0.9], &negs), 0.6, 3).unwrap();
        let scores: Vec<f64> = pool.per_query["q"].iter().map(|s| s.score).collect();
        assert_eq!(scores, vec![0.45, 0.4, 0.35]);
    }

    #[test]
    fn selection_is_prefix_monotone_in_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let negs: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let set = set_of(&[0.5], &negs);
        let lambda = 0.3;
        let mut prev: Vec<ScoredTarget> = Vec::new();
        for m in 1..45 {
            let pool = select_hard_negatives(&set, lambda, m).unwrap();
            let cur = pool.per_query["q"].clone();
            assert!(cur.iter().all(|s| s.score < lambda));
            assert_eq!(&cur[..prev.len()], &prev[..]);
            prev = cur;
        }
    }

    #[test]
    fn harder_negatives_do_not_raise_f1() {
        // Mean optimal F1 over seeds as the share of near-positive negatives grows.
        let mean_f1 = |frac: f64| {
            let mut total = 0.0;
            for seed in 0..40 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = |rng: &mut ChaCha8Rng, mu: f64, sd: f64| {
                    let u: f64 = rng.random_range(1e-12..1.0);
                    let v: f64 = rng.random_range(0.0..1.0);
                    mu + sd * (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
                };
                let pos: Vec<f64> = (0..30).map(|_| normal(&mut rng, 0.8, 0.08)).collect();
                let neg: Vec<f64> = (0..120)
                    .map(|i| {
                        if (i as f64) < frac * 120.0 { normal(&mut rng, 0.7, 0.08) } else { normal(&mut rng, 0.2, 0.1) }
                    })
                    .collect();
                total += sweep_threshold(&set_of(&pos, &neg)).unwrap().f1_at_star;
            }
            total / 40.0
        };
        let f: Vec<f64> = [0.0, 0.1, 0.3, 0.6].iter().map(|&x| mean_f1(x)).collect();
        assert!(f.windows(2).all(|w| w[1] <= w[0]), "{f:?}");
    }
}
