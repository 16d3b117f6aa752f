//! Item records and the data-side procedures applied before training:
//! text composition with random field dropping, modality pattern
//! enumeration, and seq2item history construction.

mod patterns;
mod records;
mod sequences;
mod text;

pub use patterns::{enumerate_patterns, DatasetSpec, MetaTask, Pattern, PatternPair};
pub use records::{
    load_items, write_items, GoldPair, GradedLabel, ItemLoad, ItemRecord, Modality, ModalitySet,
    RecordError, TextField,
};
pub use sequences::{build_sequence_samples, jaccard, SequenceMode, SequenceSample, MULTI_PEAK_JACCARD};
pub use text::{compose_text, FIELD_SEPARATOR};
