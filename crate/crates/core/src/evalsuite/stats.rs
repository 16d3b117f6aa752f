use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    pub pos_mean: f64,
    pub neg_mean: f64,
    pub gap: f64,
    /// Fraction of negative similarities at or above the 5th percentile of
    /// the positives.
    pub overlap: f64,
    /// Counts over 64 equal bins spanning [-1, 1].
    pub pos_histogram: Vec<u64>,
    pub neg_histogram: Vec<u64>,
}

fn check_finite(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Empty(what));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

fn histogram(xs: &[f64]) -> Vec<u64> {
    let mut h = vec![0; HISTOGRAM_BINS];
    for x in xs {
        let bin = ((x.clamp(-1.0, 1.0) + 1.0) / 2.0 * HISTOGRAM_BINS as f64) as usize;
        h[bin.min(HISTOGRAM_BINS - 1)] += 1;
    }
    h
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn separability(pos: &[f64], neg: &[f64]) -> Result<Separability> {
    check_finite(pos, "positive similarities")?;
    check_finite(neg, "negative similarities")?;
    let mut sorted = pos.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p5 = quantile(&sorted, 0.05);
    let (pos_mean, neg_mean) = (mean(pos), mean(neg));
    Ok(Separability {
        pos_mean,
        neg_mean,
        gap: pos_mean - neg_mean,
        overlap: neg.iter().filter(|&&s| s >= p5).count() as f64 / neg.len() as f64,
        pos_histogram: histogram(pos),
        neg_histogram: histogram(neg),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmiScore {
    pub nmi: f64,
    /// Both labelings have a single cluster; the score is defined as 1.
    pub degenerate: bool,
}

fn entropy<'a>(counts: impl Iterator<Item = &'a usize>, n: f64) -> f64 {
    counts
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn bump<K: Hash + Eq + Copy>(counts: &mut HashMap<K, usize>, key: K, order: &mut Vec<K>) {
    let c = counts.entry(key).or_default();
    if *c == 0 {
        order.push(key);
    }
    *c += 1;
}

/// `2·I(A;B) / (H(A) + H(B))` with natural logarithms.
pub fn nmi<A: Hash + Eq, B: Hash + Eq>(a: &[A], b: &[B]) -> Result<NmiScore> {
    Error::check_dim(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Empty("labelings"));
    }
    let n = a.len() as f64;
    let mut ca: HashMap<&A, usize> = HashMap::new();
    let mut cb: HashMap<&B, usize> = HashMap::new();
    let mut joint: HashMap<(&A, &B), usize> = HashMap::new();
    // Keys in first-seen order, so every sum runs in the same order from
    // one process to the next.
    let (mut order_a, mut order_b, mut order_joint) = (Vec::new(), Vec::new(), Vec::new());
    for (x, y) in a.iter().zip(b) {
        bump(&mut ca, x, &mut order_a);
        bump(&mut cb, y, &mut order_b);
        bump(&mut joint, (x, y), &mut order_joint);
    }
    let ha = entropy(order_a.iter().map(|x| &ca[x]), n);
    let hb = entropy(order_b.iter().map(|y| &cb[y]), n);
    if ha + hb == 0.0 {
        return Ok(NmiScore {
            nmi: 1.0,
            degenerate: true,
        });
    }
    let mi: f64 = order_joint
        .iter()
        .map(|(x, y)| {
            let pxy = joint[&(*x, *y)] as f64 / n;
            pxy * (pxy * n * n / (ca[x] as f64 * cb[y] as f64)).ln()
        })
        .sum();
    Ok(NmiScore {
        nmi: (2.0 * mi / (ha + hb)).clamp(0.0, 1.0),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingConsistency {
    pub kendall_tau: f64,
    pub topk_overlap: f64,
}

/// Inversions of `v`, counted by merge sort.
fn inversions(v: &mut [usize]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = inversions(&mut v[..mid]) + inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            merged.push(v[i]);
            i += 1;
        } else {
            merged.push(v[j]);
            count += (mid - i) as u64;
            j += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..]);
    v.copy_from_slice(&merged);
    count
}

/// Kendall τ between two rankings of the same elements (best first) and
/// the overlap of their top-k prefixes. A single element has τ = 1.
pub fn ranking_consistency<T: Ord + Clone>(a: &[T], b: &[T], k: usize) -> Result<RankingConsistency> {
    if a.is_empty() {
        return Err(Error::Empty("ranking"));
    }
    Error::check_dim(a.len(), b.len())?;
    let pos: BTreeMap<&T, usize> = a.iter().enumerate().map(|(i, x)| (x, i)).collect();
    if pos.len() != a.len() {
        return Err(Error::invalid("duplicate element in ranking"));
    }
    let mut seq = Vec::with_capacity(b.len());
    for x in b {
        seq.push(*pos.get(x).ok_or_else(|| Error::invalid("rankings hold different elements"))?);
    }
    let mut sorted = seq.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seq.len() {
        return Err(Error::invalid("duplicate element in ranking"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let n = a.len() as u64;
    let pairs = n * (n - 1) / 2;
    let discordant = inversions(&mut seq);
    let kendall_tau = if pairs == 0 {
        1.0
    } else {
        (pairs as f64 - 2.0 * discordant as f64) / pairs as f64
    };
    let k = k.min(a.len());
    let top_a: std::collections::BTreeSet<&T> = a[..k].iter().collect();
    let shared = b[..k].iter().filter(|x| top_a.contains(x)).count();
    Ok(RankingConsistency {
        kendall_tau,
        topk_overlap: shared as f64 / k as f64,
    })
}

/// Mann–Whitney AUC with midranks, so ties count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Error::check_dim(scores.len(), labels.len())?;
    check_finite(scores, "scores")?;
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank of the tie block i..=j
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}
