use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::{add_scaled_into, Encoded, ToyEncoder, ViewGrads};
use super::optim::OptimizerState;
use super::optim::OptimizerConfig;
use super::plan::{assemble_batch, Catalog, TrainingSet};
use super::step::{batch_loss, initial_tau, BatchContext, TrainExample};
use crate::datasets::{ItemRecord, MetaTask, ModalitySet, SequenceSample};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::losses::{cosine_with_grad, nce_loss, GradientBundle};
use crate::tensor::Tensor;

/// Temperature key of the sequence-to-item objective.
pub const SEQ_TAU_KEY: &str = "seq2item";
/// Gradient and momentum key of the ID projection matrix.
pub const ID_PROJECTION_KEY: &str = "id_projection";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    Seq2item,
    Id2item,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub mode: DistillMode,
    /// Most recent history items kept per sample.
    pub seq_len: usize,
    pub id_dim: usize,
    /// Weight of the auxiliary item-to-item NCE next to ID alignment.
    pub aux_weight: f64,
    pub instruction: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: DistillMode::Seq2item,
            seq_len: 10,
            id_dim: 16,
            aux_weight: 1.0,
            instruction: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.id_dim == 0 {
            return Err(Error::invalid("seq_len and id_dim must be >= 1"));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::invalid("aux_weight must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Linear map from the item embedding space into the recommender's ID
/// embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdProjection {
    /// `id_dim × d`
    pub weight: Tensor,
}

impl IdProjection {
    pub fn new(id_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weight: Tensor::gaussian(id_dim, dim, 1.0 / (dim as f64).sqrt(), &mut rng),
        }
    }

    pub fn project(&self, n_m: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.weight.cols(), n_m.len())?;
        Ok(self.weight.matvec(n_m))
    }
}

/// Mean of `1 − cos(projected, id)` over the ID embeddings, with its
/// gradient with respect to `projected`.
pub fn id_alignment_loss(projected: &[f64], ids: &[Embedding]) -> Result<(f64, Vec<f64>)> {
    if ids.is_empty() {
        return Err(Error::Empty("id embeddings"));
    }
    let n = ids.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; projected.len()];
    for id in ids {
        Error::check_dim(projected.len(), id.dim())?;
        let (c, dp, _) = cosine_with_grad(projected, id.values());
        loss += (1.0 - c) / n;
        add_scaled_into(&mut grad, -1.0 / n, &dp);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillMetrics {
    pub loss: f64,
    /// ID alignment term; zero for sequence distillation.
    pub alignment: f64,
    /// Unweighted auxiliary NCE; zero when the auxiliary task is off.
    pub aux_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// A history window resolved to records, with its target.
pub struct SequenceExample<'a> {
    pub history: Vec<&'a ItemRecord>,
    pub target: &'a ItemRecord,
}

/// Resolves a sample against the catalog, keeping the last `seq_len`
/// history entries.
pub fn resolve_sequence<'a>(sample: &SequenceSample, catalog: &'a Catalog, seq_len: usize) -> Result<SequenceExample<'a>> {
    if sample.history.is_empty() {
        return Err(Error::Empty("sequence history"));
    }
    let start = sample.history.len().saturating_sub(seq_len);
    let get = |id: &str| catalog.get(id).ok_or_else(|| Error::UnknownId(id.to_string()));
    Ok(SequenceExample {
        history: sample.history[start..].iter().map(|id| get(id)).collect::<Result<_>>()?,
        target: get(&sample.target)?,
    })
}

fn encode_all(enc: &ToyEncoder, recs: &[&ItemRecord], instruction: usize) -> Result<Vec<Encoded>> {
    recs.par_iter()
        .map(|r| enc.forward(r, Some(instruction), ModalitySet::ALL))
        .collect()
}

fn mean_rows(rows: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        add_scaled_into(&mut out, 1.0 / rows.len() as f64, r);
    }
    out
}

/// Mean-pooled `n_m` of the history records.
pub fn sequence_embedding(enc: &ToyEncoder, history: &[&ItemRecord], instruction: usize) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::Empty("sequence history"));
    }
    let encoded = encode_all(enc, history, instruction)?;
    Ok(mean_rows(&encoded.iter().map(Encoded::n_m).collect::<Vec<_>>()))
}

fn seq_tau(enc: &ToyEncoder) -> f64 {
    enc.loss.tau(SEQ_TAU_KEY).unwrap_or(initial_tau(MetaTask::Seq2item))
}

/// In-batch NCE between pooled histories and their targets; every other
/// target in the batch is a negative.
pub fn seq2item_loss(enc: &ToyEncoder, batch: &[SequenceExample], instruction: usize) -> Result<(f64, GradientBundle)> {
    if batch.is_empty() {
        return Err(Error::Empty("sequence batch"));
    }
    if batch.iter().any(|s| s.history.is_empty()) {
        return Err(Error::Empty("sequence history"));
    }
    let tau = seq_tau(enc);
    let histories: Vec<Vec<Encoded>> = batch
        .iter()
        .map(|s| encode_all(enc, &s.history, instruction))
        .collect::<Result<_>>()?;
    let targets = encode_all(enc, &batch.iter().map(|s| s.target).collect::<Vec<_>>(), instruction)?;
    let pooled: Vec<Vec<f64>> = histories
        .iter()
        .map(|h| mean_rows(&h.iter().map(Encoded::n_m).collect::<Vec<_>>()))
        .collect();

    let d = enc.dim();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut d_tau = 0.0;
    let mut d_pooled = vec![vec![0.0; d]; batch.len()];
    let mut d_targets = vec![vec![0.0; d]; batch.len()];
    for b in 0..batch.len() {
        let others: Vec<usize> = (0..batch.len()).filter(|&j| j != b).collect();
        let negs: Vec<&[f64]> = others.iter().map(|&j| targets[j].n_m()).collect();
        let out = nce_loss(&pooled[b], targets[b].n_m(), &negs, tau)?;
        loss += scale * out.loss;
        d_tau += scale * out.grads.scalar("tau").unwrap_or(0.0);
        add_scaled_into(&mut d_pooled[b], scale, out.grads.get("query").expect("nce query grad"));
        add_scaled_into(&mut d_targets[b], scale, out.grads.get("positive").expect("nce positive grad"));
        for (k, &j) in others.iter().enumerate() {
            let g = out.grads.get(&format!("negative.{k}")).expect("nce negative grad");
            add_scaled_into(&mut d_targets[j], scale, g);
        }
    }

    let mut grads = GradientBundle::new();
    for (h, dp) in histories.iter().zip(&d_pooled) {
        let per_item: Vec<f64> = dp.iter().map(|g| g / h.len() as f64).collect();
        for e in h {
            enc.backward(e, &ViewGrads::from_n_m(per_item.clone()), &mut grads);
        }
    }
    for (e, dt) in targets.iter().zip(d_targets) {
        enc.backward(e, &ViewGrads::from_n_m(dt), &mut grads);
    }
    grads.insert(format!("log_tau.{SEQ_TAU_KEY}"), vec![tau * d_tau]);
    Ok((loss, grads))
}

/// One update on a batch of sequence samples.
pub fn seq2item_step(
    enc: &mut ToyEncoder,
    opt: &mut OptimizerState,
    samples: &[SequenceSample],
    catalog: &Catalog,
    cfg: &DistillConfig,
) -> Result<DistillMetrics> {
    cfg.validate()?;
    enc.loss.ensure(SEQ_TAU_KEY, initial_tau(MetaTask::Seq2item));
    let batch = samples
        .iter()
        .map(|s| resolve_sequence(s, catalog, cfg.seq_len))
        .collect::<Result<Vec<_>>>()?;
    let (loss, grads) = seq2item_loss(enc, &batch, cfg.instruction)?;
    let info = opt.apply(enc, &grads)?;
    Ok(DistillMetrics {
        loss,
        alignment: 0.0,
        aux_loss: 0.0,
        grad_norm: info.grad_norm,
        lr: info.lr,
    })
}

/// An item with the recommender-side ID embeddings it should align with.
pub struct IdExample<'a> {
    pub record: &'a ItemRecord,
    pub ids: Vec<Embedding>,
}

/// Auxiliary item-to-item task run alongside ID alignment.
pub struct AuxTask<'a, 'b> {
    pub batch: &'b [TrainExample<'a>],
    pub ctx: BatchContext<'b>,
}

pub struct Id2itemLoss {
    pub loss: f64,
    pub alignment: f64,
    pub aux_loss: f64,
    /// Encoder gradients plus [`ID_PROJECTION_KEY`].
    pub grads: GradientBundle,
}

/// `alignment + aux_weight · aux NCE`, alignment averaged over `examples`.
pub fn id2item_loss(
    enc: &ToyEncoder,
    projection: &IdProjection,
    examples: &[IdExample],
    aux: Option<&AuxTask>,
    cfg: &DistillConfig,
) -> Result<Id2itemLoss> {
    if examples.is_empty() {
        return Err(Error::Empty("id2item batch"));
    }
    let encoded = encode_all(enc, &examples.iter().map(|e| e.record).collect::<Vec<_>>(), cfg.instruction)?;
    let scale = 1.0 / examples.len() as f64;
    let mut grads = GradientBundle::new();
    let mut d_weight = Tensor::zeros(projection.weight.rows(), projection.weight.cols());
    let mut alignment = 0.0;
    for (e, ex) in encoded.iter().zip(examples) {
        let projected = projection.project(e.n_m())?;
        let (l, d_proj) = id_alignment_loss(&projected, &ex.ids)?;
        alignment += scale * l;
        d_weight.add_outer(scale, &d_proj, e.n_m());
        let d_n_m: Vec<f64> = projection.weight.matvec_t(&d_proj).iter().map(|g| scale * g).collect();
        enc.backward(e, &ViewGrads::from_n_m(d_n_m), &mut grads);
    }
    grads.insert(ID_PROJECTION_KEY, d_weight.into_vec());

    let mut aux_loss = 0.0;
    if let Some(task) = aux.filter(|_| cfg.aux_weight > 0.0) {
        let out = batch_loss(enc, task.batch, &task.ctx)?;
        aux_loss = out.loss;
        grads.add_scaled(&out.grads, cfg.aux_weight)?;
    }
    Ok(Id2itemLoss {
        loss: alignment + cfg.aux_weight * aux_loss,
        alignment,
        aux_loss,
        grads,
    })
}

/// One joint update of the encoder and the ID projection.
pub fn id2item_step(
    enc: &mut ToyEncoder,
    projection: &mut IdProjection,
    opt: &mut OptimizerState,
    examples: &[IdExample],
    aux: Option<&AuxTask>,
    cfg: &DistillConfig,
) -> Result<DistillMetrics> {
    cfg.validate()?;
    Error::check_dim(cfg.id_dim, projection.weight.rows())?;
    if let Some(task) = aux {
        enc.loss.ensure(task.ctx.tau_key(), initial_tau(task.ctx.spec.meta_task));
    }
    let out = id2item_loss(enc, projection, examples, aux, cfg)?;
    let mut params = enc.params_mut();
    params.push((ID_PROJECTION_KEY.to_string(), projection.weight.as_mut_slice()));
    let info = opt.apply_params(params, &out.grads)?;
    if !enc.is_finite() || !projection.weight.is_finite() {
        return Err(Error::NonFinite("parameters after update"));
    }
    Ok(DistillMetrics {
        loss: out.loss,
        alignment: out.alignment,
        aux_loss: out.aux_loss,
        grad_norm: info.grad_norm,
        lr: info.lr,
    })
}

/// Runs `steps` sequence-distillation updates on batches sampled without
/// replacement from `samples`.
#[allow(clippy::too_many_arguments)]
pub fn run_seq2item(
    enc: &mut ToyEncoder,
    samples: &[SequenceSample],
    catalog: &Catalog,
    cfg: &DistillConfig,
    optimizer: &OptimizerConfig,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<DistillMetrics>> {
    if samples.is_empty() {
        return Err(Error::Empty("sequence samples"));
    }
    let mut opt = OptimizerState::new(optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|_| {
            let idx = rand::seq::index::sample(&mut rng, samples.len(), batch_size.min(samples.len()));
            let batch: Vec<SequenceSample> = idx.iter().map(|i| samples[i].clone()).collect();
            seq2item_step(enc, &mut opt, &batch, catalog, cfg)
        })
        .collect()
}

/// Runs `steps` ID-distillation updates. When `aux` is given, each step
/// also draws a batch of its pairs for the auxiliary task.
#[allow(clippy::too_many_arguments)]
pub fn run_id2item(
    enc: &mut ToyEncoder,
    projection: &mut IdProjection,
    examples: &[IdExample],
    aux: Option<(&TrainingSet, &Catalog)>,
    cfg: &DistillConfig,
    optimizer: &OptimizerConfig,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<DistillMetrics>> {
    if examples.is_empty() {
        return Err(Error::Empty("id2item examples"));
    }
    let mut opt = OptimizerState::new(optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = super::step::StepSettings::default();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let idx = rand::seq::index::sample(&mut rng, examples.len(), batch_size.min(examples.len()));
        let batch: Vec<IdExample> = idx
            .iter()
            .map(|i| IdExample {
                record: examples[i].record,
                ids: examples[i].ids.clone(),
            })
            .collect();
        let metrics = match aux {
            Some((set, catalog)) => {
                let n = set.pairs.len();
                let aux_idx = rand::seq::index::sample(&mut rng, n, batch_size.min(n)).into_vec();
                let aux_batch = assemble_batch(set, &aux_idx, catalog, None)?;
                let task = AuxTask {
                    batch: &aux_batch,
                    ctx: BatchContext {
                        spec: &set.spec,
                        settings: &settings,
                    },
                };
                id2item_step(enc, projection, &mut opt, &batch, Some(&task), cfg)?
            }
            None => id2item_step(enc, projection, &mut opt, &batch, None, cfg)?,
        };
        out.push(metrics);
    }
    Ok(out)
}
