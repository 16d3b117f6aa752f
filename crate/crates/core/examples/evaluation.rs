//! The full metric report over embedding stores, including a round trip
//! through the binary embedding format.
//!
//! cargo run --release --example evaluation

use omni_embed::evalsuite::{evaluate, EvalConfig};
use omni_embed::io::{read_store, write_store};
use omni_embed::synth::{gen_synthetic, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = gen_synthetic(&SynthSpec { items_per_cluster: 50, ..SynthSpec::default() }, 4)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("latents.bin");
    write_store(&path, &data.latents)?;
    let store = read_store(&path)?;
    println!("{} embeddings of dim {} read back from {}", store.len(), store.dim(), path.display());

    let side = |prefix: &str| {
        let rows: Vec<usize> = (0..store.len()).filter(|&i| store.id(i).starts_with(prefix)).collect();
        store.select(&rows)
    };
    let (queries, targets) = (side("q/"), side("t/"));
    let report = evaluate(&queries, &targets, &data.pairs, Some(&data.orders), &EvalConfig::default())?;
    println!("{}", serde_json::to_string_pretty(&serde_json::json!({
        "recall": report.recall,
        "gap": report.separability.as_ref().map(|s| s.gap),
        "overlap": report.separability.as_ref().map(|s| s.overlap),
        "nmi": report.nmi.map(|n| n.nmi),
        "kendall_tau": report.kendall_tau,
        "topk_overlap": report.topk_overlap,
        "bijective_accuracy": report.bijective_accuracy,
        "auc": report.auc,
        "warnings": report.warnings,
    }))?);
    Ok(())
}
