use super::{LossOutput, LossWeights};
use crate::error::Result;

/// Already evaluated loss terms. Absent terms count as zero.
#[derive(Debug, Clone, Default)]
pub struct LossComponents {
    pub nce_mrl: LossOutput,
    pub cosent: Option<LossOutput>,
    pub micl: Option<LossOutput>,
    pub late_fusion: Option<LossOutput>,
}

/// `L = L_nce-mrl + λ·L_cosent + α·L_micl + β·L_lf`, with gradients combined
/// by the same weights over the union of keys.
pub fn combined_loss(c: &LossComponents, w: &LossWeights) -> Result<LossOutput> {
    w.validate()?;
    let mut out = LossOutput {
        loss: c.nce_mrl.loss,
        grads: c.nce_mrl.grads.clone(),
        flagged: c.nce_mrl.flagged,
    };
    for (term, weight) in [(&c.cosent, w.lambda), (&c.micl, w.alpha), (&c.late_fusion, w.beta)] {
        if let Some(t) = term {
            out.loss += weight * t.loss;
            out.grads.add_scaled(&t.grads, weight)?;
            out.flagged |= t.flagged;
        }
    }
    Ok(out)
}
