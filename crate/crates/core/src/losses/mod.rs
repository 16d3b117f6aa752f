//! Training objectives with hand-derived gradients.
//!
//! Every loss returns a [`LossOutput`]: the scalar value plus a
//! [`GradientBundle`] keyed by input role (`"query"`, `"positive"`,
//! `"negative.3"`, `"tau"`, ...). The trainer uses the lower-level
//! similarity-space functions ([`nce_terms`], [`cosent_terms`]) directly and
//! chains them through [`cosine_with_grad`].

mod combined;
mod cosent;
mod gradcheck;
mod late_fusion;
mod micl;
mod nce;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm};

pub use combined::{combined_loss, LossComponents};
pub use cosent::{cosent_loss, cosent_terms, CosentTerms};
pub(crate) use gradcheck::Tally;
pub use gradcheck::{finite_diff_check, loss_gradient_suite, resolvable, GradCheckEntry, FD_STEP, GRAD_TOLERANCE};
pub use late_fusion::{late_fusion, FusionForward, FusionGrads, LateFusionGate};
pub use micl::{micl_loss, ModalViews};
pub use nce::{hard_contrastive_loss, nce_loss, nce_mrl_loss, nce_terms, NceTerms};

/// Initial temperature for retrieval-style tasks.
pub const TAU_RETRIEVAL: f64 = 0.07;
/// Initial temperature for classification posed as retrieval.
pub const TAU_CLASSIFICATION: f64 = 0.05;

/// Gradients keyed by parameter or input role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle(BTreeMap<String, Vec<f64>>);

impl GradientBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, grad: Vec<f64>) {
        self.0.insert(key.into(), grad);
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.0.get(key).map(Vec::as_slice)
    }

    pub fn scalar(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|g| g.first().copied())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self += scale · other`, taking the union of keys.
    pub fn add_scaled(&mut self, other: &GradientBundle, scale: f64) -> Result<()> {
        for (k, g) in &other.0 {
            match self.0.get_mut(k) {
                Some(mine) => {
                    Error::check_dim(mine.len(), g.len())?;
                    mine.iter_mut().zip(g).for_each(|(m, x)| *m += scale * x);
                }
                None => {
                    self.0.insert(k.clone(), g.iter().map(|x| scale * x).collect());
                }
            }
        }
        Ok(())
    }

    /// Adds `grad` into the first `grad.len()` coordinates under `key`,
    /// creating a zero vector of length `full` if needed.
    pub(crate) fn accumulate_prefix(&mut self, key: &str, full: usize, grad: &[f64]) {
        let slot = self.0.entry(key.to_string()).or_insert_with(|| vec![0.0; full]);
        slot.iter_mut().zip(grad).for_each(|(s, g)| *s += g);
    }

    pub fn global_norm(&self) -> f64 {
        self.0.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().flatten().all(|g| g.is_finite())
    }

    /// Concatenates the gradients for `keys` in order; missing keys read as
    /// zeros of the given length.
    pub fn flatten(&self, keys: &[(String, usize)]) -> Vec<f64> {
        keys.iter()
            .flat_map(|(k, n)| self.0.get(k).cloned().unwrap_or_else(|| vec![0.0; *n]))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: GradientBundle,
    /// Set when a degenerate input (no negatives, missing view) forced a
    /// zero contribution.
    pub flagged: bool,
}

impl LossOutput {
    pub fn zero_flagged() -> Self {
        Self {
            flagged: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// COSENT weight.
    pub lambda: f64,
    /// Modality-specific contrastive weight.
    pub alpha: f64,
    /// Late-fusion weight.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.1,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda, self.alpha, self.beta].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Learnable temperatures, stored as `log τ` per key, and the combination
/// weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub log_tau: BTreeMap<String, f64>,
    pub weights: LossWeights,
}

impl LossParams {
    pub fn tau(&self, key: &str) -> Option<f64> {
        self.log_tau.get(key).map(|l| l.exp())
    }

    /// Registers `key` with initial temperature `tau` unless already present.
    pub fn ensure(&mut self, key: &str, tau: f64) {
        self.log_tau.entry(key.to_string()).or_insert(tau.ln());
    }
}

/// Cosine similarity with its gradient with respect to both arguments.
/// A zero-norm argument gives similarity 0 and zero gradients.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return (0.0, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let c = dot(a, b) / (na * nb);
    let da = a.iter().zip(b).map(|(x, y)| y / (na * nb) - c * x / (na * na)).collect();
    let db = a.iter().zip(b).map(|(x, y)| x / (na * nb) - c * y / (nb * nb)).collect();
    (c, da, db)
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_gradient_matches_differences() {
        let a = [0.3, -1.2, 0.5];
        let b = [1.0, 0.4, -0.7];
        let (c, da, _) = cosine_with_grad(&a, &b);
        assert!((c - crate::embedding::cosine(&a, &b).unwrap()).abs() < 1e-15);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = a;
            p[i] += h;
            let mut m = a;
            m[i] -= h;
            let fd = (cosine_with_grad(&p, &b).0 - cosine_with_grad(&m, &b).0) / (2.0 * h);
            assert!((fd - da[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn bundle_union_and_scale() {
        let mut a = GradientBundle::new();
        a.insert("x", vec![1.0, 2.0]);
        let mut b = GradientBundle::new();
        b.insert("x", vec![1.0, 1.0]);
        b.insert("y", vec![3.0]);
        a.add_scaled(&b, 2.0).unwrap();
        assert_eq!(a.get("x").unwrap(), &[3.0, 4.0]);
        assert_eq!(a.get("y").unwrap(), &[6.0]);
        let mut c = GradientBundle::new();
        c.insert("x", vec![1.0]);
        assert!(a.add_scaled(&c, 1.0).is_err());
    }

    #[test]
    fn params_store_log_tau() {
        let mut p = LossParams::default();
        p.ensure("i2i", TAU_RETRIEVAL);
        p.ensure("i2i", 1.0);
        assert!((p.tau("i2i").unwrap() - 0.07).abs() < 1e-15);
        assert!(p.tau("cls").is_none());
    }
}
