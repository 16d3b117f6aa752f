//! Finite-difference certification of the composed training objectives:
//! a whole training step, sequence distillation and ID distillation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::distill::{id2item_loss, seq2item_loss, DistillConfig, DistillMode, IdExample, IdProjection, SequenceExample, ID_PROJECTION_KEY, SEQ_TAU_KEY};
use super::encoder::{EncoderConfig, ToyEncoder};
use super::step::{batch_loss, BatchContext, StepSettings, TrainExample};
use crate::datasets::{DatasetSpec, ItemRecord, MetaTask, Modality, ModalitySet, Pattern};
use crate::embedding::Embedding;
use crate::error::Result;
use crate::losses::{finite_diff_check, resolvable, GradCheckEntry, LateFusionGate, LossWeights, Tally, FD_STEP};

pub(crate) fn small_config() -> EncoderConfig {
    EncoderConfig {
        vision_dim: 4,
        audio_dim: 3,
        text_dim: 5,
        dim: 8,
        mrl_dims: vec![4, 8],
        instructions: 2,
        init_gain: 1.0,
    }
}

pub(crate) fn spec(patterns: Vec<Pattern>) -> DatasetSpec {
    DatasetSpec {
        name: "toy".into(),
        meta_task: MetaTask::Q2i,
        query_modalities: ModalitySet::ALL,
        target_modalities: ModalitySet::ALL,
        patterns,
        instruction_id: 0,
        target_instruction_id: Some(1),
    }
}

pub(crate) fn random_item(rng: &mut ChaCha8Rng, id: &str, cfg: &EncoderConfig) -> ItemRecord {
    let mut r = ItemRecord::new(id);
    for m in Modality::ALL {
        let v = (0..cfg.raw_dim(m)).map(|_| rng.random_range(-1.0..1.0)).collect();
        r = r.with_feature(m, v);
    }
    r
}

/// Encoder with a non-saturated gate plus random items, temperatures and
/// loss weights.
fn random_instance(seed: u64, n_items: usize) -> (ToyEncoder, Vec<ItemRecord>, StepSettings, ChaCha8Rng) {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n_items).map(|i| random_item(&mut rng, &format!("i{i}"), &cfg)).collect();
    let mut enc = ToyEncoder::new(cfg, seed).expect("valid config");
    enc.gate = LateFusionGate::random(enc.dim(), 0.25, &mut rng);
    enc.loss.ensure("toy", rng.random_range(0.2..1.0));
    enc.loss.ensure(SEQ_TAU_KEY, rng.random_range(0.2..1.0));
    let settings = StepSettings {
        weights: LossWeights {
            lambda: rng.random_range(0.5..2.0),
            alpha: rng.random_range(0.5..2.0),
            beta: rng.random_range(0.5..2.0),
        },
        cosent_tau: rng.random_range(0.2..1.0),
    };
    (enc, items, settings, rng)
}

/// Two examples with hard negatives and graded targets, so every loss
/// term is active.
fn composition_batch(items: &[ItemRecord]) -> Vec<TrainExample<'_>> {
    let mut a = TrainExample::new(&items[0], &items[1]);
    a.hard_negatives.push(&items[4]);
    a.graded = vec![(&items[1], 1.0), (&items[4], 0.5), (&items[5], 0.0)];
    let mut b = TrainExample::new(&items[2], &items[3]);
    b.hard_negatives.push(&items[5]);
    vec![a, b]
}

/// Compares analytic and numeric gradients of `loss` over the flat encoder
/// parameters; `None` when the instance is below finite-difference
/// resolution.
fn check_encoder<F>(enc: &ToyEncoder, loss: F) -> Result<Option<f64>>
where
    F: Fn(&ToyEncoder) -> Result<(f64, crate::losses::GradientBundle)>,
{
    let (value, grads) = loss(enc)?;
    let layout = enc.param_layout();
    let analytic = grads.flatten(&layout);
    if !resolvable(value, &analytic, FD_STEP) {
        return Ok(None);
    }
    let f = |p: &[f64]| {
        let mut e = enc.clone();
        e.set_flat_params(p)?;
        Ok(loss(&e)?.0)
    };
    finite_diff_check(f, &enc.flat_params(), &analytic, FD_STEP).map(Some)
}

fn composition_case(seed: u64) -> Result<Option<f64>> {
    let (enc, items, settings, _) = random_instance(seed, 6);
    let batch = composition_batch(&items);
    let spec = spec(vec![Pattern::Ooc, Pattern::Itc]);
    let ctx = BatchContext {
        spec: &spec,
        settings: &settings,
    };
    check_encoder(&enc, |e| batch_loss(e, &batch, &ctx).map(|o| (o.loss, o.grads)))
}

fn seq2item_case(seed: u64) -> Result<Option<f64>> {
    let (enc, items, _, mut rng) = random_instance(seed, 7);
    let batch: Vec<SequenceExample> = (0..3)
        .map(|b| {
            let len = rng.random_range(1..=3);
            SequenceExample {
                history: (0..len).map(|_| &items[rng.random_range(0..4)]).collect(),
                target: &items[4 + b],
            }
        })
        .collect();
    check_encoder(&enc, |e| seq2item_loss(e, &batch, 0))
}

fn id2item_case(seed: u64) -> Result<Option<f64>> {
    let (enc, items, settings, mut rng) = random_instance(seed, 6);
    let id_dim = 5;
    let projection = IdProjection::new(id_dim, enc.dim(), seed.wrapping_add(1));
    let examples: Vec<IdExample> = items[..2]
        .iter()
        .map(|r| IdExample {
            record: r,
            ids: (0..2)
                .map(|_| Embedding::new((0..id_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite"))
                .collect(),
        })
        .collect();
    let aux_spec = spec(vec![Pattern::Ooc]);
    let aux_batch = vec![TrainExample::new(&items[2], &items[3]), TrainExample::new(&items[4], &items[5])];
    let aux = super::distill::AuxTask {
        batch: &aux_batch,
        ctx: BatchContext {
            spec: &aux_spec,
            settings: &settings,
        },
    };
    let cfg = DistillConfig {
        mode: DistillMode::Id2item,
        id_dim,
        aux_weight: rng.random_range(0.2..1.0),
        ..Default::default()
    };

    // The projection matrix is checked jointly with the encoder by
    // appending it to the flat parameter vector.
    let (enc_layout, n_proj) = (enc.param_layout(), projection.weight.as_slice().len());
    let split = |p: &[f64]| -> Result<(ToyEncoder, IdProjection)> {
        let mut e = enc.clone();
        let cut = p.len() - n_proj;
        e.set_flat_params(&p[..cut])?;
        let mut w = projection.clone();
        w.weight.as_mut_slice().copy_from_slice(&p[cut..]);
        Ok((e, w))
    };
    let out = id2item_loss(&enc, &projection, &examples, Some(&aux), &cfg)?;
    let mut layout = enc_layout;
    layout.push((ID_PROJECTION_KEY.to_string(), n_proj));
    let analytic = out.grads.flatten(&layout);
    if !resolvable(out.loss, &analytic, FD_STEP) {
        return Ok(None);
    }
    let mut x = enc.flat_params();
    x.extend_from_slice(projection.weight.as_slice());
    let f = |p: &[f64]| {
        let (e, w) = split(p)?;
        Ok(id2item_loss(&e, &w, &examples, Some(&aux), &cfg)?.loss)
    };
    finite_diff_check(f, &x, &analytic, FD_STEP).map(Some)
}

fn run(name: &str, instances: usize, seed: u64, case: fn(u64) -> Result<Option<f64>>) -> Result<GradCheckEntry> {
    let mut tally = Tally::default();
    let mut s = seed;
    while tally.accepted < instances && s < seed + 20 * instances.max(1) as u64 {
        tally.record(instances, case(s)?);
        s += 1;
    }
    Ok(GradCheckEntry::new(name, tally.accepted, tally.skipped, tally.worst))
}

/// Checks the gradient of a whole training step (every loss term active,
/// dim 8) against finite differences on `instances` random instances.
pub fn composition_gradient_check(instances: usize, seed: u64) -> Result<GradCheckEntry> {
    run("train_step", instances, seed, composition_case)
}

/// The same check for sequence distillation and for ID distillation with
/// its auxiliary task.
pub fn distill_gradient_checks(instances: usize, seed: u64) -> Result<Vec<GradCheckEntry>> {
    Ok(vec![
        run("seq2item", instances, seed, seq2item_case)?,
        run("id2item", instances, seed, id2item_case)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::GRAD_TOLERANCE;

    #[test]
    fn distillation_gradients() {
        for entry in distill_gradient_checks(5, 0).unwrap() {
            assert_eq!(entry.instances, 5, "{entry:?}");
            assert!(entry.max_rel_error < GRAD_TOLERANCE, "{entry:?}");
        }
    }
}
