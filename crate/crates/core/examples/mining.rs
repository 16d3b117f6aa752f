//! Threshold sweep and hard-negative selection over a synthetic corpus's
//! stand-in embeddings.
//!
//! cargo run --release --example mining

use omni_embed::mining::{mine, PoolConfig};
use omni_embed::synth::{gen_synthetic, SynthSpec};

fn main() -> omni_embed::Result<()> {
    let data = gen_synthetic(&SynthSpec { items_per_cluster: 100, ..SynthSpec::default() }, 1)?;
    let pairs = data.pairs_in("train");
    let outcome = mine(&pairs, &data.latents, 4, PoolConfig::default())?;

    println!(
        "{} positives, {} negatives scored; lambda* = {:.4} with F1 {:.3}",
        outcome.positives, outcome.negatives_scored, outcome.sweep.lambda_star, outcome.sweep.f1_at_star
    );
    for point in outcome.sweep.curve.iter().step_by(outcome.sweep.curve.len() / 8 + 1) {
        println!("  lambda {:+.3}  precision {:.3}  recall {:.3}  F1 {:.3}", point.lambda, point.precision, point.recall, point.f1);
    }

    let query = &pairs[0].query;
    println!("\nhard negatives of {query} (all below lambda*):");
    for t in outcome.pool.per_query.get(query).into_iter().flatten() {
        let same = data.cluster_of(&t.target) == data.cluster_of(query);
        println!("  {:<8} {:.4}  {}", t.target, t.score, if same { "same cluster" } else { "other cluster" });
    }
    Ok(())
}
