//! Weights training sets by Sinkhorn similarity to a benchmark, then draws
//! a stochastic-specialization schedule from the weights.
//!
//! cargo run --release --example balancing

use omni_embed::balancing::{balance, BalanceConfig};
use omni_embed::recipe::previous_model_stores;
use omni_embed::synth::{gen_synthetic, SynthSpec};
use omni_embed::trainer::draw_dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> omni_embed::Result<()> {
    let data = gen_synthetic(&SynthSpec { items_per_cluster: 100, ..SynthSpec::default() }, 2)?;
    let train = previous_model_stores(&data)?;
    let test_targets: Vec<usize> = data
        .pairs_in("test")
        .iter()
        .filter_map(|p| data.latents.position(&p.target))
        .collect();
    let bench = vec![("bench".to_string(), data.latents.select(&test_targets))];

    let report = balance(&train, &bench, &BalanceConfig::default())?;
    for ((name, sim), w) in report.train.iter().zip(&report.sim_matrix).zip(&report.weights) {
        println!("{name:<4} similarity {:.4}  weight {w:.4}", sim[0]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts = vec![0; report.weights.len()];
    for _ in 0..1000 {
        counts[draw_dataset(&report.weights, &mut rng)?] += 1;
    }
    println!("batches drawn per set over 1000 steps: {counts:?}");
    Ok(())
}
