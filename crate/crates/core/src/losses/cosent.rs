use std::collections::HashMap;

use super::{check_tau, GradientBundle, LossOutput};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CosentTerms {
    pub loss: f64,
    /// Derivative with respect to each higher-ranked similarity.
    pub d_high: Vec<f64>,
    /// Derivative with respect to each lower-ranked similarity.
    pub d_low: Vec<f64>,
    pub d_tau: f64,
}

/// `log(1 + Σ exp((s_low − s_high)/τ))` over `(s_high, s_low)` orderings.
pub fn cosent_terms(orderings: &[(f64, f64)], tau: f64) -> CosentTerms {
    if orderings.is_empty() {
        return CosentTerms {
            loss: 0.0,
            d_high: Vec::new(),
            d_low: Vec::new(),
            d_tau: 0.0,
        };
    }
    let x: Vec<f64> = orderings.iter().map(|(hi, lo)| (lo - hi) / tau).collect();
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    // softplus(lse), stable for either sign
    let loss = lse.max(0.0) + (-lse.abs()).exp().ln_1p();
    let w: Vec<f64> = x.iter().map(|v| (v - loss).exp()).collect();
    CosentTerms {
        loss,
        d_high: w.iter().map(|w| -w / tau).collect(),
        d_low: w.iter().map(|w| w / tau).collect(),
        d_tau: w.iter().zip(&x).map(|(w, x)| -w * x / tau).sum(),
    }
}

/// COSENT over named similarities. `order` lists `(higher, lower)` id
/// pairs. Gradient keys: `sim.{id}` and `tau`.
pub fn cosent_loss(sims: &[(String, f64)], order: &[(String, String)], tau: f64) -> Result<LossOutput> {
    check_tau(tau)?;
    let index: HashMap<&str, usize> = sims.iter().enumerate().map(|(i, (id, _))| (id.as_str(), i)).collect();
    let lookup = |id: &str| index.get(id).copied().ok_or_else(|| Error::UnknownId(id.to_string()));
    let pairs: Vec<(usize, usize)> = order
        .iter()
        .map(|(hi, lo)| Ok((lookup(hi)?, lookup(lo)?)))
        .collect::<Result<_>>()?;
    let values: Vec<(f64, f64)> = pairs.iter().map(|&(h, l)| (sims[h].1, sims[l].1)).collect();
    let t = cosent_terms(&values, tau);
    let mut d = vec![0.0; sims.len()];
    for (k, &(h, l)) in pairs.iter().enumerate() {
        d[h] += t.d_high[k];
        d[l] += t.d_low[k];
    }
    let mut grads = GradientBundle::new();
    for ((id, _), g) in sims.iter().zip(d) {
        grads.insert(format!("sim.{id}"), vec![g]);
    }
    grads.insert("tau", vec![t.d_tau]);
    Ok(LossOutput {
        loss: t.loss,
        grads,
        flagged: order.is_empty(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sims(v: &[(&str, f64)]) -> Vec<(String, f64)> {
        v.iter().map(|(k, s)| (k.to_string(), *s)).collect()
    }

    fn order(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(cosent_loss(&sims(&[("a", 0.3)]), &[], 0.05).unwrap().loss, 0.0);
        let s = sims(&[("hi", 0.6), ("lo", 0.7)]);
        let l = cosent_loss(&s, &order(&[("hi", "lo")]), 0.05).unwrap().loss;
        assert!((l - (1.0 + 2.0f64.exp()).ln()).abs() < 1e-12);
        assert!((l - 2.126928).abs() < 1e-6);
        let s = sims(&[("hi", 0.8), ("lo", 0.3)]);
        let l = cosent_loss(&s, &order(&[("hi", "lo")]), 0.05).unwrap().loss;
        assert!((l - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn satisfied_with_wide_margin_is_near_zero() {
        let tau = 0.05;
        let s = sims(&[("a", 0.9), ("b", 0.4), ("c", -0.1)]);
        let l = cosent_loss(&s, &order(&[("a", "b"), ("b", "c"), ("a", "c")]), tau).unwrap().loss;
        assert!((0.0..1e-3).contains(&l));
    }

    #[test]
    fn large_violations_stay_finite() {
        let t = cosent_terms(&[(-1.0, 1.0); 3], 0.001);
        assert!(t.loss.is_finite() && t.loss > 1000.0);
        assert!(t.d_high.iter().all(|d| d.is_finite()));
    }

    #[test]
    fn unknown_id_rejected() {
        assert!(cosent_loss(&sims(&[("a", 0.1)]), &order(&[("a", "z")]), 0.05).is_err());
    }
}
