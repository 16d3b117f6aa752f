//! Ready-made datasets, stage plan and evaluation views for synthetic data.
//!
//! The held-out task is cross-modal: a text-only query must find the item
//! whose vision and audio it describes. At initialisation the text and
//! vision projections are unrelated, so retrieval starts near chance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetSpec, GoldPair, MetaTask, Modality, ModalitySet, Pattern, SequenceSample};
use crate::embedding::{cosine, Embedding, EmbeddingStore};
use crate::error::{Error, Result};
use crate::evalsuite::{gold_map, recall_at_k, separability, Separability};
use crate::losses::LossWeights;
use crate::synth::SynthData;
use crate::trainer::{
    encode_records, id2item_loss, resolve_sequence, sequence_embedding, Catalog, DistillConfig, EncoderConfig, IdExample,
    IdProjection, HardNegativeSettings, OptimizerConfig, StagePlan, StageSpec, StepSettings,
    ToyEncoder, TrainingSet,
};

pub const Q2I: &str = "q2i";
pub const I2I: &str = "i2i";
pub const TTC: &str = "ttc";

fn text() -> ModalitySet {
    ModalitySet::only(Modality::Text)
}

fn video() -> ModalitySet {
    ModalitySet::only(Modality::Vision).with(Modality::Audio)
}

/// Three synthetic datasets: the cross-modal retrieval task, an omni-modal
/// item-to-item task and a text-to-text task.
pub fn dataset_specs() -> Vec<DatasetSpec> {
    vec![
        DatasetSpec {
            name: Q2I.into(),
            meta_task: MetaTask::Q2i,
            query_modalities: text(),
            target_modalities: video(),
            patterns: vec![Pattern::Ooc],
            instruction_id: 0,
            target_instruction_id: Some(1),
        },
        DatasetSpec {
            name: I2I.into(),
            meta_task: MetaTask::I2i,
            query_modalities: ModalitySet::ALL,
            target_modalities: ModalitySet::ALL,
            patterns: vec![Pattern::Ooc, Pattern::Vvc, Pattern::Itc],
            instruction_id: 2,
            target_instruction_id: None,
        },
        DatasetSpec {
            name: TTC.into(),
            meta_task: MetaTask::I2i,
            query_modalities: text(),
            target_modalities: text(),
            patterns: vec![Pattern::Ttc],
            instruction_id: 3,
            target_instruction_id: None,
        },
    ]
}

/// Every spec trained on the same train-split pairs; graded labels go to
/// the retrieval task only.
pub fn training_sets(data: &SynthData) -> Result<Vec<TrainingSet>> {
    let train = data.pairs_in("train");
    dataset_specs()
        .into_iter()
        .map(|spec| {
            let with_orders = spec.name == Q2I;
            let set = TrainingSet::new(spec, train.clone())?;
            Ok(if with_orders { set.with_graded(&data.orders) } else { set })
        })
        .collect()
}

/// Encoder dimensions matching a synthetic spec.
pub fn encoder_config(data: &SynthData) -> EncoderConfig {
    EncoderConfig {
        vision_dim: data.spec.vision_dim,
        audio_dim: data.spec.audio_dim,
        text_dim: data.spec.text_dim,
        ..EncoderConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSettings {
    pub diverse_steps: usize,
    pub hard_steps: usize,
    pub batch_size: usize,
    pub hard_negatives: usize,
    /// Sampling weights of q2i, i2i, ttc in the diverse stage.
    pub diverse_weights: Vec<f64>,
    pub optimizer: OptimizerConfig,
}

impl Default for PlanSettings {
    fn default() -> Self {
        Self {
            diverse_steps: 300,
            hard_steps: 600,
            batch_size: 32,
            hard_negatives: 16,
            diverse_weights: vec![0.5, 0.3, 0.2],
            optimizer: OptimizerConfig {
                lr_max: 0.05,
                lr_min: 0.005,
                warmup_steps: 20,
                min_tau: 0.05,
                ..OptimizerConfig::default()
            },
        }
    }
}

/// Diverse multi-dataset stage, then a hard-negative stage on the
/// retrieval task alone.
pub fn stage_plan(settings: &PlanSettings) -> StagePlan {
    let loss = StepSettings {
        weights: LossWeights::default(),
        ..StepSettings::default()
    };
    StagePlan {
        stages: vec![
            StageSpec {
                name: "diverse".into(),
                datasets: vec![Q2I.into(), I2I.into(), TTC.into()],
                weights: settings.diverse_weights.clone(),
                steps: settings.diverse_steps,
                batch_size: settings.batch_size,
                hard_negatives: None,
                loss: loss.clone(),
            },
            StageSpec {
                name: "hard".into(),
                datasets: vec![Q2I.into()],
                weights: vec![1.0],
                steps: settings.hard_steps,
                batch_size: settings.batch_size,
                hard_negatives: Some(HardNegativeSettings {
                    m: settings.hard_negatives,
                    ..HardNegativeSettings::default()
                }),
                loss,
            },
        ],
        optimizer: settings.optimizer.clone(),
    }
}

/// Held-out query and target stores for the retrieval task.
pub struct HeldOut {
    pub queries: EmbeddingStore,
    pub targets: EmbeddingStore,
    pub pairs: Vec<GoldPair>,
}

pub fn held_out(enc: &ToyEncoder, data: &SynthData, catalog: &Catalog) -> Result<HeldOut> {
    encode_split(enc, data, catalog, Q2I, "test")
}

/// Encodes the queries and targets of one split through the views and
/// instructions of the named dataset.
pub fn encode_split(enc: &ToyEncoder, data: &SynthData, catalog: &Catalog, dataset: &str, split: &str) -> Result<HeldOut> {
    let spec = dataset_specs()
        .into_iter()
        .find(|s| s.name == dataset)
        .ok_or_else(|| Error::invalid(format!("unknown dataset `{dataset}`; expected one of {Q2I}, {I2I}, {TTC}")))?;
    let pairs = data.pairs_in(split);
    let get = |id: &String| catalog.get(id).ok_or_else(|| Error::UnknownId(id.clone()));
    let qs = pairs.iter().map(|p| get(&p.query)).collect::<Result<Vec<_>>>()?;
    let ts = pairs.iter().map(|p| get(&p.target)).collect::<Result<Vec<_>>>()?;
    Ok(HeldOut {
        queries: encode_records(enc, &qs, spec.instruction_id, spec.query_modalities)?,
        targets: encode_records(enc, &ts, spec.target_instruction(), spec.target_modalities)?,
        pairs,
    })
}

/// Separability restricted to twin clusters: positives are gold pairs whose
/// cluster has a twin, negatives pair each such query with every held-out
/// target of the twin cluster.
pub fn hard_cluster_separability(held: &HeldOut, data: &SynthData) -> Result<Separability> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for p in &held.pairs {
        let Some(cluster) = p.cluster else { continue };
        let Some(twin) = data.twin_of(cluster) else { continue };
        let q = held.queries.get(&p.query).ok_or_else(|| Error::UnknownId(p.query.clone()))?;
        let t = held.targets.get(&p.target).ok_or_else(|| Error::UnknownId(p.target.clone()))?;
        pos.push(cosine(q.values(), t.values())?);
        for other in held.pairs.iter().filter(|o| o.cluster == Some(twin)) {
            let t = held.targets.get(&other.target).ok_or_else(|| Error::UnknownId(other.target.clone()))?;
            neg.push(cosine(q.values(), t.values())?);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Empty("twin-cluster pairs"));
    }
    separability(&pos, &neg)
}

/// Recall@1 of pooled histories against the distinct targets of `samples`.
pub fn sequence_recall_at_1(enc: &ToyEncoder, samples: &[SequenceSample], catalog: &Catalog, cfg: &DistillConfig) -> Result<f64> {
    let mut q_ids = Vec::new();
    let mut q_rows = Vec::new();
    let mut gold = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let ex = resolve_sequence(s, catalog, cfg.seq_len)?;
        let id = format!("seq/{i}");
        q_rows.push(Embedding::new(sequence_embedding(enc, &ex.history, cfg.instruction)?)?);
        gold.insert(id.clone(), s.target.clone());
        q_ids.push(id);
    }
    let mut target_ids: Vec<&String> = samples.iter().map(|s| &s.target).collect();
    target_ids.sort();
    target_ids.dedup();
    let recs = target_ids
        .iter()
        .map(|id| catalog.get(*id).ok_or_else(|| Error::UnknownId((*id).clone())))
        .collect::<Result<Vec<_>>>()?;
    let targets = encode_records(enc, &recs, cfg.instruction, ModalitySet::ALL)?;
    let queries = EmbeddingStore::from_parts(q_ids, q_rows)?;
    Ok(recall_at_k(&queries, &targets, &gold, &[1])?.recall[&1])
}

/// Train-split target records with the embedding of every ID system.
pub fn id_examples<'a>(data: &SynthData, catalog: &'a Catalog, split: &str) -> Result<Vec<IdExample<'a>>> {
    data.pairs_in(split)
        .iter()
        .map(|p| {
            let record = catalog.get(&p.target).ok_or_else(|| Error::UnknownId(p.target.clone()))?;
            let ids = data
                .id_embeddings
                .iter()
                .map(|store| store.get(&p.target).cloned().ok_or_else(|| Error::UnknownId(p.target.clone())))
                .collect::<Result<Vec<_>>>()?;
            Ok(IdExample { record, ids })
        })
        .collect()
}

/// Mean ID alignment loss over `examples`.
pub fn mean_alignment(enc: &ToyEncoder, projection: &IdProjection, examples: &[IdExample], cfg: &DistillConfig) -> Result<f64> {
    let no_aux = DistillConfig {
        aux_weight: 0.0,
        ..cfg.clone()
    };
    Ok(id2item_loss(enc, projection, examples, None, &no_aux)?.alignment)
}

/// Held-out Recall@1 of the item-to-item task.
pub fn i2i_recall_at_1(enc: &ToyEncoder, data: &SynthData, catalog: &Catalog) -> Result<f64> {
    let held = encode_split(enc, data, catalog, I2I, "test")?;
    Ok(recall_at_k(&held.queries, &held.targets, &gold_map(&held.pairs)?, &[1])?.recall[&1])
}

/// Stand-ins for a previous model's embeddings of each training dataset
/// and of the benchmark, in latent space: `q2i` sees train queries, `i2i`
/// train targets, `ttc` only the train queries of twin clusters (all train
/// queries when the corpus has no twins).
pub fn previous_model_stores(data: &SynthData) -> Result<Vec<(String, EmbeddingStore)>> {
    let train = data.pairs_in("train");
    let pick = |ids: Vec<&str>| -> Result<EmbeddingStore> {
        let idx = ids
            .iter()
            .map(|id| data.latents.position(id).ok_or_else(|| Error::UnknownId(id.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(data.latents.select(&idx))
    };
    let twin_queries: Vec<&str> = train
        .iter()
        .filter(|p| p.cluster.and_then(|c| data.twin_of(c)).is_some())
        .map(|p| p.query.as_str())
        .collect();
    let all_queries: Vec<&str> = train.iter().map(|p| p.query.as_str()).collect();
    let twin_queries = if twin_queries.is_empty() { all_queries.clone() } else { twin_queries };
    Ok(vec![
        (Q2I.to_string(), pick(all_queries)?),
        (I2I.to_string(), pick(train.iter().map(|p| p.target.as_str()).collect())?),
        (TTC.to_string(), pick(twin_queries)?),
    ])
}
