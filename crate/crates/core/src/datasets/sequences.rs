use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::records::ItemRecord;
use crate::embedding::{cosine, EmbeddingStore};
use crate::error::{Error, Result};

/// `|a ∩ b| / |a ∪ b|`, with two empty sets scoring 0.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceMode {
    ContentSinglePeak,
    ContentMultiPeak,
    CollabSinglePeak,
    CollabMultiPeak,
}

impl SequenceMode {
    fn min_positive_behaviors(self) -> u32 {
        match self {
            SequenceMode::ContentSinglePeak | SequenceMode::CollabSinglePeak => 3,
            SequenceMode::ContentMultiPeak | SequenceMode::CollabMultiPeak => 1,
        }
    }

    fn multi_peak(self) -> bool {
        matches!(self, SequenceMode::ContentMultiPeak | SequenceMode::CollabMultiPeak)
    }

    fn content_ranked(self) -> bool {
        matches!(self, SequenceMode::ContentSinglePeak | SequenceMode::ContentMultiPeak)
    }
}

/// Label-set overlap above which a multi-peak history item is kept.
pub const MULTI_PEAK_JACCARD: f64 = 0.5;

/// A user history (oldest first) paired with the item that follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub history: Vec<String>,
    pub target: String,
    pub mode: SequenceMode,
    /// Set when fewer than `seq_len` history items survived filtering.
    #[serde(default)]
    pub short_history: bool,
}

/// Builds the seq2item sample for one chronological viewing history.
///
/// Items below the mode's positive-behaviour threshold are dropped first and
/// the most recent survivor becomes the target. Multi-peak modes then keep
/// only items whose behaviour labels overlap the target's with Jaccard above
/// [`MULTI_PEAK_JACCARD`]. Content modes keep the `seq_len` items whose
/// embeddings are closest to the target's; collaborative modes group items
/// by identical label sets and fill `seq_len` slots proportionally to group
/// size, most recent first within each group. The history keeps
/// chronological order.
///
/// Returns an empty list when nothing survives.
pub fn build_sequence_samples(
    history_items: &[ItemRecord],
    mode: SequenceMode,
    seq_len: usize,
    embeddings: Option<&EmbeddingStore>,
) -> Result<Vec<SequenceSample>> {
    if seq_len == 0 {
        return Err(Error::invalid("seq_len must be at least 1"));
    }
    let survivors: Vec<&ItemRecord> = history_items
        .iter()
        .filter(|r| r.positive_behavior_count >= mode.min_positive_behaviors())
        .collect();
    let Some((&target, earlier)) = survivors.split_last() else {
        return Ok(Vec::new());
    };
    let candidates: Vec<(usize, &ItemRecord)> = earlier
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, r)| r.id != target.id)
        .filter(|(_, r)| {
            !mode.multi_peak() || jaccard(&r.behavior_labels, &target.behavior_labels) > MULTI_PEAK_JACCARD
        })
        .collect();
    if candidates.is_empty() {
        return Ok(Vec::new());
    }

    let mut chosen: Vec<usize> = if candidates.len() <= seq_len {
        candidates.iter().map(|(i, _)| *i).collect()
    } else if mode.content_ranked() {
        let store = embeddings.ok_or_else(|| Error::invalid("content modes need item embeddings"))?;
        let lookup = |id: &str| store.get(id).ok_or_else(|| Error::UnknownId(id.to_string()));
        let t = lookup(&target.id)?;
        let mut scored = Vec::with_capacity(candidates.len());
        for &(i, r) in &candidates {
            scored.push((cosine(lookup(&r.id)?, t)?, i));
        }
        // Highest similarity first; the more recent item wins ties.
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
        scored.into_iter().take(seq_len).map(|(_, i)| i).collect()
    } else {
        proportional_by_label_group(&candidates, seq_len)
    };
    chosen.sort_unstable();

    Ok(vec![SequenceSample {
        history: chosen.iter().map(|&i| earlier[i].id.clone()).collect(),
        target: target.id.clone(),
        mode,
        short_history: chosen.len() < seq_len,
    }])
}

/// Allocates `slots` across exact-label-set groups by largest remainder and
/// takes the most recent items of each group.
fn proportional_by_label_group(candidates: &[(usize, &ItemRecord)], slots: usize) -> Vec<usize> {
    let mut groups: BTreeMap<&BTreeSet<String>, Vec<usize>> = BTreeMap::new();
    for &(i, r) in candidates {
        groups.entry(&r.behavior_labels).or_default().push(i);
    }
    let total = candidates.len() as f64;
    let mut alloc: Vec<(usize, f64, &Vec<usize>)> = groups
        .values()
        .map(|members| {
            let exact = slots as f64 * members.len() as f64 / total;
            (exact.floor() as usize, exact - exact.floor(), members)
        })
        .collect();
    let mut remaining = slots - alloc.iter().map(|a| a.0).sum::<usize>();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| {
        alloc[b].1
            .total_cmp(&alloc[a].1)
            .then(alloc[b].2.len().cmp(&alloc[a].2.len()))
            .then(a.cmp(&b))
    });
    for g in order.into_iter().cycle() {
        if remaining == 0 {
            break;
        }
        if alloc[g].0 < alloc[g].2.len() {
            alloc[g].0 += 1;
            remaining -= 1;
        }
    }
    alloc
        .iter()
        .flat_map(|(n, _, members)| members.iter().rev().take(*n).copied())
        .collect()
}
