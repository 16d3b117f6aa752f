//! Contrastive objectives on hand-made vectors, then the finite-difference
//! certification of every analytic gradient.
//!
//! cargo run --release --example losses

use omni_embed::losses::{finite_diff_check, loss_gradient_suite, nce_loss, nce_mrl_loss, FD_STEP};
use omni_embed::MrlDims;

fn main() -> omni_embed::Result<()> {
    let query = [1.0, 0.2, 0.0, 0.1];
    let positive = [0.9, 0.3, 0.1, 0.0];
    let negatives = [[0.0, 1.0, 0.0, 0.2], [0.5, -0.5, 0.5, 0.0]];

    let out = nce_loss(&query, &positive, &negatives, 0.07)?;
    println!("nce loss {:.4}, d/dtau {:+.4}", out.loss, out.grads.scalar("tau").unwrap_or(0.0));

    let dims = MrlDims::new(vec![2, 4])?;
    let mrl = nce_mrl_loss(&query, &positive, &negatives, &dims, 0.07)?;
    println!("nce over prefixes {:?}: {:.4}", dims.as_slice(), mrl.loss);

    // Numeric check of the query gradient for this one instance.
    let f = |q: &[f64]| Ok(nce_loss(q, &positive, &negatives, 0.07)?.loss);
    let err = finite_diff_check(f, &query, out.grads.get("query").unwrap(), FD_STEP)?;
    println!("query gradient max relative error {err:.2e}");

    println!("\ncertification over random instances:");
    for entry in loss_gradient_suite(20, 0)? {
        println!(
            "  {:<17} {:>3} instances  max rel err {:.2e}  {}",
            entry.name,
            entry.instances,
            entry.max_rel_error,
            if entry.passed { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
