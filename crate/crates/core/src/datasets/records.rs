use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::aggregate_audio_chunks;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Vision, Modality::Audio, Modality::Text];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vision" => Ok(Modality::Vision),
            "audio" => Ok(Modality::Audio),
            "text" => Ok(Modality::Text),
            other => Err(Error::invalid(format!("unknown modality `{other}`"))),
        }
    }
}

/// Small set of modalities; iterates in vision, audio, text order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<Modality>", into = "Vec<Modality>")]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const ALL: ModalitySet = ModalitySet(0b111);

    pub fn only(m: Modality) -> Self {
        Self(1 << m.index())
    }

    pub fn with(self, m: Modality) -> Self {
        Self(self.0 | (1 << m.index()))
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn intersect(self, other: ModalitySet) -> Self {
        Self(self.0 & other.0)
    }

    pub fn is_subset(self, other: ModalitySet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }
}

impl FromIterator<Modality> for ModalitySet {
    fn from_iter<I: IntoIterator<Item = Modality>>(iter: I) -> Self {
        iter.into_iter().fold(Self::EMPTY, Self::with)
    }
}

impl From<Vec<Modality>> for ModalitySet {
    fn from(v: Vec<Modality>) -> Self {
        v.into_iter().collect()
    }
}

impl From<ModalitySet> for Vec<Modality> {
    fn from(s: ModalitySet) -> Self {
        s.iter().collect()
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::ALL {
            return f.write_str("omni");
        }
        let names: Vec<&str> = self.iter().map(Modality::name).collect();
        f.write_str(&names.join("+"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextField {
    Title,
    Ocr,
    Asr,
    Nickname,
    Tags,
}

impl TextField {
    /// Concatenation order for composed text.
    pub const ORDER: [TextField; 5] = [
        TextField::Title,
        TextField::Ocr,
        TextField::Asr,
        TextField::Nickname,
        TextField::Tags,
    ];
}

/// One multimodal item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub features: BTreeMap<Modality, Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub text_fields: BTreeMap<TextField, String>,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    #[serde(default)]
    pub behavior_labels: BTreeSet<String>,
    #[serde(default)]
    pub positive_behavior_count: u32,
}

impl ItemRecord {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            features: BTreeMap::new(),
            text_fields: BTreeMap::new(),
            tags: BTreeSet::new(),
            behavior_labels: BTreeSet::new(),
            positive_behavior_count: 0,
        }
    }

    pub fn with_feature(mut self, m: Modality, values: Vec<f64>) -> Self {
        self.features.insert(m, values);
        self
    }

    pub fn modalities(&self) -> ModalitySet {
        self.features.keys().copied().collect()
    }

    pub fn feature(&self, m: Modality) -> Option<&[f64]> {
        self.features.get(&m).map(Vec::as_slice)
    }

    /// Checks the record against per-modality feature dimensions.
    pub fn validate(&self, modality_dims: &BTreeMap<Modality, usize>) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("empty id"));
        }
        if self.features.is_empty() {
            return Err(Error::invalid(format!("`{}` has no modality features", self.id)));
        }
        for (m, v) in &self.features {
            let want = modality_dims
                .get(m)
                .ok_or_else(|| Error::invalid(format!("`{}`: no dim configured for {m}", self.id)))?;
            if v.len() != *want {
                return Err(Error::invalid(format!(
                    "`{}`: {m} feature has dim {}, expected {want}",
                    self.id,
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("`{}`: non-finite {m} feature", self.id)));
            }
        }
        Ok(())
    }
}

/// Feature payload as it may appear on disk: a single vector, or a list of
/// per-chunk vectors (long audio) that gets mean-pooled on load.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum FeatureValue {
    Vector(Vec<f64>),
    Chunks(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize)]
struct RawItem {
    id: String,
    features: BTreeMap<Modality, FeatureValue>,
    #[serde(default)]
    text_fields: BTreeMap<TextField, String>,
    #[serde(default)]
    tags: BTreeSet<String>,
    #[serde(default)]
    behavior_labels: BTreeSet<String>,
    #[serde(default)]
    positive_behavior_count: u32,
}

impl RawItem {
    fn into_record(self) -> Result<ItemRecord> {
        let mut features = BTreeMap::new();
        for (m, v) in self.features {
            let v = match v {
                FeatureValue::Vector(v) => v,
                FeatureValue::Chunks(chunks) => aggregate_audio_chunks(&chunks)?.into_vec(),
            };
            features.insert(m, v);
        }
        Ok(ItemRecord {
            id: self.id,
            features,
            text_fields: self.text_fields,
            tags: self.tags,
            behavior_labels: self.behavior_labels,
            positive_behavior_count: self.positive_behavior_count,
        })
    }
}

/// A line that could not be turned into a valid record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordError {
    pub line: usize,
    pub id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ItemLoad {
    pub records: Vec<ItemRecord>,
    pub errors: Vec<RecordError>,
}

/// Reads newline-delimited item records. Bad lines are reported in
/// [`ItemLoad::errors`] rather than dropped silently.
pub fn load_items(path: impl AsRef<Path>, modality_dims: &BTreeMap<Modality, usize>) -> Result<ItemLoad> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut load = ItemLoad::default();
    let mut seen = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawItem>(&line)
            .map_err(Error::from)
            .and_then(RawItem::into_record)
            .and_then(|r| r.validate(modality_dims).map(|_| r));
        match parsed {
            Ok(r) if !seen.insert(r.id.clone()) => load.errors.push(RecordError {
                line: n + 1,
                id: Some(r.id.clone()),
                message: format!("duplicate id `{}`", r.id),
            }),
            Ok(r) => load.records.push(r),
            Err(e) => load.errors.push(RecordError {
                line: n + 1,
                id: serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_string)),
                message: e.to_string(),
            }),
        }
    }
    Ok(load)
}

pub fn write_items(path: impl AsRef<Path>, records: &[ItemRecord]) -> Result<()> {
    crate::io::write_jsonl(path, records)
}

/// A labelled positive (query, target) pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GoldPair {
    pub query: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
}

impl GoldPair {
    pub fn new(query: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            target: target.into(),
            split: None,
            cluster: None,
        }
    }
}

/// Graded relevance of a (query, target) pair, used to derive ranking
/// constraints for the COSENT objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedLabel {
    pub query: String,
    pub target: String,
    pub score: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn dims() -> BTreeMap<Modality, usize> {
        [(Modality::Vision, 2), (Modality::Audio, 2), (Modality::Text, 3)].into()
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn empty_file_loads_nothing() {
        let f = write_lines(&[]);
        let load = load_items(f.path(), &dims()).unwrap();
        assert!(load.records.is_empty() && load.errors.is_empty());
    }

    #[test]
    fn malformed_line_is_reported() {
        let f = write_lines(&[
            r#"{"id":"a","features":{"vision":[1,2]}}"#,
            r#"{"id":"b","features":{"vision":[1,2,3]}}"#,
        ]);
        let load = load_items(f.path(), &dims()).unwrap();
        assert_eq!(load.records.len(), 1);
        assert_eq!(load.errors.len(), 1);
        assert_eq!(load.errors[0].line, 2);
        assert_eq!(load.errors[0].id.as_deref(), Some("b"));
    }

    #[test]
    fn audio_chunks_are_pooled_on_load() {
        let f = write_lines(&[r#"{"id":"a","features":{"audio":[[1,1],[3,3]]}}"#]);
        let load = load_items(f.path(), &dims()).unwrap();
        assert_eq!(load.records[0].feature(Modality::Audio), Some(&[2.0, 2.0][..]));
    }

    #[test]
    fn records_need_a_modality_and_an_id() {
        let f = write_lines(&[
            r#"{"id":"","features":{"vision":[1,2]}}"#,
            r#"{"id":"x","features":{}}"#,
            r#"{"id":"y","features":{"vision":[1,2]}}"#,
            r#"{"id":"y","features":{"vision":[1,2]}}"#,
            "not json",
        ]);
        let load = load_items(f.path(), &dims()).unwrap();
        assert_eq!(load.records.len(), 1);
        assert_eq!(load.errors.len(), 4);
    }

    #[test]
    fn missing_modalities_are_omitted_keys() {
        let r = ItemRecord::new("a").with_feature(Modality::Text, vec![0.5, 0.0, 1.0]);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains(r#""features":{"text":[0.5,0.0,1.0]}"#));
        assert!(!json.contains("null"));
    }

    #[test]
    fn modality_set_display_and_subset() {
        let s: ModalitySet = [Modality::Text, Modality::Vision].into_iter().collect();
        assert_eq!(s.to_string(), "vision+text");
        assert_eq!(ModalitySet::ALL.to_string(), "omni");
        assert!(s.is_subset(ModalitySet::ALL));
        assert!(!ModalitySet::ALL.is_subset(s));
    }
}
