//! Sequence-to-item and ID-to-item distillation on a briefly trained
//! encoder.
//!
//! cargo run --release --example distillation

use omni_embed::recipe::{self, PlanSettings};
use omni_embed::synth::{gen_synthetic, SynthSpec};
use omni_embed::trainer::{
    catalog, run_id2item, run_plan, run_seq2item, DistillConfig, DistillMode, IdProjection, OptimizerConfig, ToyEncoder,
};

fn main() -> omni_embed::Result<()> {
    let data = gen_synthetic(&SynthSpec { items_per_cluster: 100, ..SynthSpec::default() }, 5)?;
    let catalog = catalog(data.items.iter().cloned())?;
    let sets = recipe::training_sets(&data)?;
    let mut enc = ToyEncoder::new(recipe::encoder_config(&data), 0)?;
    // The diverse stage alone is enough to give distillation a starting point.
    let mut plan = recipe::stage_plan(&PlanSettings {
        diverse_steps: 150,
        ..PlanSettings::default()
    });
    plan.stages.truncate(1);
    run_plan(&plan, &sets, &catalog, &mut enc, 0, |_, _| Ok(()))?;

    let optimizer = OptimizerConfig {
        lr_max: 0.01,
        lr_min: 0.001,
        warmup_steps: 10,
        total_steps: 200,
        min_tau: 0.05,
        ..OptimizerConfig::default()
    };

    let seq = DistillConfig::default();
    let mut seq_enc = enc.clone();
    let before = recipe::sequence_recall_at_1(&seq_enc, &data.sequences_test, &catalog, &seq)?;
    run_seq2item(&mut seq_enc, &data.sequences_train, &catalog, &seq, &optimizer, 200, 16, 0)?;
    let after = recipe::sequence_recall_at_1(&seq_enc, &data.sequences_test, &catalog, &seq)?;
    println!("seq2item: held-out history -> next item R@1 {before:.3} -> {after:.3}");

    let id = DistillConfig {
        mode: DistillMode::Id2item,
        id_dim: data.spec.id_dim,
        ..DistillConfig::default()
    };
    let mut id_enc = enc.clone();
    let mut projection = IdProjection::new(id.id_dim, id_enc.dim(), 0);
    let train = recipe::id_examples(&data, &catalog, "train")?;
    let test = recipe::id_examples(&data, &catalog, "test")?;
    let aux = sets.iter().find(|s| s.spec.name == recipe::I2I).expect("recipe has i2i");
    let align_before = recipe::mean_alignment(&id_enc, &projection, &test, &id)?;
    let i2i_before = recipe::i2i_recall_at_1(&id_enc, &data, &catalog)?;
    run_id2item(&mut id_enc, &mut projection, &train, Some((aux, &catalog)), &id, &optimizer, 200, 32, 0)?;
    println!(
        "id2item: alignment loss {align_before:.3} -> {:.3}, i2i R@1 {i2i_before:.3} -> {:.3}",
        recipe::mean_alignment(&id_enc, &projection, &test, &id)?,
        recipe::i2i_recall_at_1(&id_enc, &data, &catalog)?
    );
    Ok(())
}
