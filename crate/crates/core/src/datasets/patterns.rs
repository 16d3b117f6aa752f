use std::fmt;

use serde::{Deserialize, Serialize};

use super::records::{ItemRecord, Modality, ModalitySet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaTask {
    I2i,
    Q2i,
    Cls,
    Seq2item,
    Id2item,
}

/// Query/target matching pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pattern {
    /// image → text
    #[serde(rename = "ITC")]
    Itc,
    /// image → image
    #[serde(rename = "IIC")]
    Iic,
    /// video → text
    #[serde(rename = "VTC")]
    Vtc,
    /// video → video
    #[serde(rename = "VVC")]
    Vvc,
    /// text → text
    #[serde(rename = "TTC")]
    Ttc,
    /// everything available → everything available
    #[serde(rename = "OOC")]
    Ooc,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Pattern::Itc => "ITC",
            Pattern::Iic => "IIC",
            Pattern::Vtc => "VTC",
            Pattern::Vvc => "VVC",
            Pattern::Ttc => "TTC",
            Pattern::Ooc => "OOC",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Image,
    Video,
    Text,
    Omni,
}

impl Side {
    /// The view this side takes from `available`, or `None` when the
    /// required modality is missing.
    fn view(self, available: ModalitySet) -> Option<ModalitySet> {
        let v = match self {
            Side::Image => available.intersect(ModalitySet::only(Modality::Vision)),
            Side::Video if available.contains(Modality::Vision) => {
                available.intersect(ModalitySet::only(Modality::Vision).with(Modality::Audio))
            }
            Side::Video => ModalitySet::EMPTY,
            Side::Text => available.intersect(ModalitySet::only(Modality::Text)),
            Side::Omni => available,
        };
        (!v.is_empty()).then_some(v)
    }

    fn required(self) -> ModalitySet {
        match self {
            Side::Image | Side::Video => ModalitySet::only(Modality::Vision),
            Side::Text => ModalitySet::only(Modality::Text),
            Side::Omni => ModalitySet::EMPTY,
        }
    }
}

impl Pattern {
    fn sides(self) -> (Side, Side) {
        match self {
            Pattern::Itc => (Side::Image, Side::Text),
            Pattern::Iic => (Side::Image, Side::Image),
            Pattern::Vtc => (Side::Video, Side::Text),
            Pattern::Vvc => (Side::Video, Side::Video),
            Pattern::Ttc => (Side::Text, Side::Text),
            Pattern::Ooc => (Side::Omni, Side::Omni),
        }
    }

    /// Modalities the query and target sides must offer.
    pub fn required(self) -> (ModalitySet, ModalitySet) {
        let (q, t) = self.sides();
        (q.required(), t.required())
    }

    /// Views this pattern takes given the modalities available per side.
    pub fn views(self, query: ModalitySet, target: ModalitySet) -> Option<(ModalitySet, ModalitySet)> {
        let (qs, ts) = self.sides();
        Some((qs.view(query)?, ts.view(target)?))
    }
}

/// Static description of one training or evaluation dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub meta_task: MetaTask,
    pub query_modalities: ModalitySet,
    pub target_modalities: ModalitySet,
    pub patterns: Vec<Pattern>,
    /// Task token prepended on the query side.
    pub instruction_id: usize,
    /// Task token for the target side; defaults to `instruction_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_instruction_id: Option<usize>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patterns.is_empty() {
            return Err(Error::invalid(format!("dataset `{}` has no patterns", self.name)));
        }
        for p in &self.patterns {
            let (q, t) = p.required();
            if !q.is_subset(self.query_modalities) || !t.is_subset(self.target_modalities) {
                return Err(Error::invalid(format!(
                    "dataset `{}`: pattern {p} needs query {q} / target {t}, declared {} / {}",
                    self.name, self.query_modalities, self.target_modalities
                )));
            }
        }
        Ok(())
    }

    pub fn target_instruction(&self) -> usize {
        self.target_instruction_id.unwrap_or(self.instruction_id)
    }
}

/// One satisfiable pattern for a concrete (query, target) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatternPair {
    pub pattern: Pattern,
    pub query_view: ModalitySet,
    pub target_view: ModalitySet,
}

/// Every pattern of `spec` whose modalities exist on both records, in the
/// order they are listed. Unsatisfiable patterns are skipped.
pub fn enumerate_patterns(query: &ItemRecord, target: &ItemRecord, spec: &DatasetSpec) -> Vec<PatternPair> {
    let q = query.modalities().intersect(spec.query_modalities);
    let t = target.modalities().intersect(spec.target_modalities);
    spec.patterns
        .iter()
        .filter_map(|&pattern| {
            let (query_view, target_view) = pattern.views(q, t)?;
            Some(PatternPair {
                pattern,
                query_view,
                target_view,
            })
        })
        .collect()
}
