//! Two-stage training of the toy encoder (diverse datasets, then mined hard
//! negatives) with held-out retrieval before and after, and a checkpoint.
//!
//! cargo run --release --example training

use omni_embed::evalsuite::{gold_map, recall_at_k};
use omni_embed::recipe::{self, PlanSettings};
use omni_embed::synth::{gen_synthetic, SynthSpec};
use omni_embed::trainer::{catalog, load_checkpoint, run_plan, save_checkpoint, ToyEncoder};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = gen_synthetic(&SynthSpec { items_per_cluster: 100, ..SynthSpec::default() }, 3)?;
    let catalog = catalog(data.items.iter().cloned())?;
    let sets = recipe::training_sets(&data)?;
    let settings = PlanSettings {
        diverse_steps: 150,
        hard_steps: 150,
        ..PlanSettings::default()
    };
    let plan = recipe::stage_plan(&settings);
    let mut enc = ToyEncoder::new(recipe::encoder_config(&data), 0)?;

    let recall = |enc: &ToyEncoder| -> omni_embed::Result<String> {
        let held = recipe::held_out(enc, &data, &catalog)?;
        let r = recall_at_k(&held.queries, &held.targets, &gold_map(&held.pairs)?, &[1, 10])?;
        Ok(format!("R@1 {:.3}  R@10 {:.3}", r.recall[&1], r.recall[&10]))
    };
    println!("init        {}", recall(&enc)?);
    let reports = run_plan(&plan, &sets, &catalog, &mut enc, 0, |stage, enc| {
        println!(
            "{:<11} {}  loss {:.3} -> {:.3}  draws {:?}",
            stage.name,
            recall(enc)?,
            stage.start_loss(),
            stage.tail_loss(20),
            stage.draws
        );
        Ok(())
    })?;
    if let Some(m) = reports[1].mining.first() {
        println!("hard stage mined at lambda* {:.3} (F1 {:.3})", m.lambda_star, m.f1);
    }

    let dir = tempfile::tempdir()?;
    save_checkpoint(&enc, dir.path(), Some("hard"))?;
    let restored = load_checkpoint(dir.path())?;
    println!("restored    {}", recall(&restored)?);
    Ok(())
}
