use serde::{Deserialize, Serialize};

use super::{nce_loss, GradientBundle, LossOutput};
use crate::error::Result;

/// Per-item outputs of the encoder split by modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalViews {
    /// Pooled vision tokens.
    pub n_v: Option<Vec<f64>>,
    /// Pooled text tokens.
    pub n_t: Option<Vec<f64>>,
    /// Pooled over every token, the retrieval embedding.
    pub n_m: Vec<f64>,
    /// Raw visual embedding fed to the late-fusion gate.
    pub v: Option<Vec<f64>>,
}

/// Vision-with-vision plus text-with-text NCE. Negatives for each term are
/// the same-modality views in `in_batch`; entries missing that view are
/// skipped. A term whose query or positive view is absent, or that has no
/// negatives, contributes 0 and flags the output.
///
/// Gradient keys: `{query,positive}.{vision,text}`,
/// `negative.{i}.{vision,text}` (indexed into `in_batch`) and `tau`.
pub fn micl_loss(q: &ModalViews, t: &ModalViews, in_batch: &[ModalViews], tau: f64) -> Result<LossOutput> {
    let mut out = LossOutput::default();
    let mut tau_grad = 0.0;
    let terms: [(&str, fn(&ModalViews) -> Option<&Vec<f64>>); 2] =
        [("vision", |m| m.n_v.as_ref()), ("text", |m| m.n_t.as_ref())];
    for (name, view) in terms {
        let (Some(qv), Some(tv)) = (view(q), view(t)) else {
            out.flagged = true;
            continue;
        };
        let (idx, negs): (Vec<usize>, Vec<&Vec<f64>>) =
            in_batch.iter().enumerate().filter_map(|(i, m)| view(m).map(|v| (i, v))).unzip();
        let part = nce_loss(qv, tv, &negs, tau)?;
        out.flagged |= part.flagged;
        out.loss += part.loss;
        let mut g = GradientBundle::new();
        g.insert(format!("query.{name}"), part.grads.get("query").unwrap().to_vec());
        g.insert(format!("positive.{name}"), part.grads.get("positive").unwrap().to_vec());
        for (k, &i) in idx.iter().enumerate() {
            g.insert(
                format!("negative.{i}.{name}"),
                part.grads.get(&format!("negative.{k}")).unwrap().to_vec(),
            );
        }
        tau_grad += part.grads.scalar("tau").unwrap();
        out.grads.add_scaled(&g, 1.0)?;
    }
    out.grads.insert("tau", vec![tau_grad]);
    Ok(out)
}
