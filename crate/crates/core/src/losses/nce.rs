use super::{check_tau, cosine_with_grad, GradientBundle, LossOutput};
use crate::embedding::MrlDims;
use crate::error::{Error, Result};

/// InfoNCE in similarity space, with derivatives for every similarity and
/// for the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct NceTerms {
    pub loss: f64,
    pub d_pos: f64,
    pub d_negs: Vec<f64>,
    pub d_tau: f64,
    /// No negatives: the softmax is over a single entry and the loss is 0.
    pub degenerate: bool,
}

/// `−log(e^{s⁺/τ} / (e^{s⁺/τ} + Σ e^{s⁻/τ}))`.
pub fn nce_terms(pos: f64, negs: &[f64], tau: f64) -> NceTerms {
    if negs.is_empty() {
        return NceTerms {
            loss: 0.0,
            d_pos: 0.0,
            d_negs: Vec::new(),
            d_tau: 0.0,
            degenerate: true,
        };
    }
    let max = negs.iter().copied().fold(pos, f64::max) / tau;
    let e_pos = (pos / tau - max).exp();
    let e_negs: Vec<f64> = negs.iter().map(|s| (s / tau - max).exp()).collect();
    let total = e_pos + e_negs.iter().sum::<f64>();
    let lse = max + total.ln();
    let p_pos = e_pos / total;
    let p_negs: Vec<f64> = e_negs.iter().map(|e| e / total).collect();
    let expected = p_pos * pos + p_negs.iter().zip(negs).map(|(p, s)| p * s).sum::<f64>();
    NceTerms {
        loss: lse - pos / tau,
        d_pos: (p_pos - 1.0) / tau,
        d_negs: p_negs.iter().map(|p| p / tau).collect(),
        d_tau: (pos - expected) / (tau * tau),
        degenerate: false,
    }
}

fn check_dims<T: AsRef<[f64]>>(q: &[f64], pos: &[f64], negs: &[T]) -> Result<()> {
    Error::check_dim(q.len(), pos.len())?;
    for n in negs {
        Error::check_dim(q.len(), n.as_ref().len())?;
    }
    Ok(())
}

/// Cosine InfoNCE. Gradient keys: `query`, `positive`, `negative.{i}`, `tau`.
pub fn nce_loss<T: AsRef<[f64]>>(q: &[f64], pos: &[f64], negs: &[T], tau: f64) -> Result<LossOutput> {
    check_tau(tau)?;
    check_dims(q, pos, negs)?;
    let (s_pos, dq_pos, dt_pos) = cosine_with_grad(q, pos);
    let neg_cos: Vec<_> = negs.iter().map(|n| cosine_with_grad(q, n.as_ref())).collect();
    let sims: Vec<f64> = neg_cos.iter().map(|c| c.0).collect();
    let t = nce_terms(s_pos, &sims, tau);

    let mut grads = GradientBundle::new();
    let mut gq: Vec<f64> = dq_pos.iter().map(|g| t.d_pos * g).collect();
    grads.insert("positive", dt_pos.iter().map(|g| t.d_pos * g).collect());
    for (i, ((_, dq, dn), w)) in neg_cos.iter().zip(&t.d_negs).enumerate() {
        gq.iter_mut().zip(dq).for_each(|(a, g)| *a += w * g);
        grads.insert(format!("negative.{i}"), dn.iter().map(|g| w * g).collect());
    }
    grads.insert("query", gq);
    grads.insert("tau", vec![t.d_tau]);
    Ok(LossOutput {
        loss: t.loss,
        grads,
        flagged: t.degenerate,
    })
}

/// Sum of [`nce_loss`] over the nested prefix slices in `dims`, sharing one
/// temperature.
pub fn nce_mrl_loss<T: AsRef<[f64]>>(q: &[f64], pos: &[f64], negs: &[T], dims: &MrlDims, tau: f64) -> Result<LossOutput> {
    check_dims(q, pos, negs)?;
    Error::check_dim(q.len(), dims.full())?;
    let full = q.len();
    let mut out = LossOutput::default();
    for &d in dims.as_slice() {
        let sliced: Vec<&[f64]> = negs.iter().map(|n| &n.as_ref()[..d]).collect();
        let part = nce_loss(&q[..d], &pos[..d], &sliced, tau)?;
        out.loss += part.loss;
        out.flagged |= part.flagged;
        for (k, g) in part.grads.iter() {
            let len = if k == "tau" { 1 } else { full };
            out.grads.accumulate_prefix(k, len, g);
        }
    }
    Ok(out)
}

/// NCE whose denominator holds mined hard negatives and random negatives.
/// Gradient keys: `query`, `positive`, `hard.{i}`, `random.{i}`, `tau`.
pub fn hard_contrastive_loss<T: AsRef<[f64]>, U: AsRef<[f64]>>(
    q: &[f64],
    pos: &[f64],
    hard: &[T],
    random: &[U],
    tau: f64,
) -> Result<LossOutput> {
    let negs: Vec<&[f64]> = hard.iter().map(AsRef::as_ref).chain(random.iter().map(AsRef::as_ref)).collect();
    let inner = nce_loss(q, pos, &negs, tau)?;
    let mut grads = GradientBundle::new();
    for (k, g) in inner.grads.iter() {
        let key = match k.strip_prefix("negative.") {
            Some(i) => {
                let i: usize = i.parse().expect("numeric negative key");
                if i < hard.len() {
                    format!("hard.{i}")
                } else {
                    format!("random.{}", i - hard.len())
                }
            }
            None => k.to_string(),
        };
        grads.insert(key, g.to_vec());
    }
    Ok(LossOutput { grads, ..inner })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    /// Direct evaluation of the NCE formula from cosines.
    fn oracle(pos: f64, negs: &[f64], tau: f64) -> f64 {
        let num = (pos / tau).exp();
        let den = num + negs.iter().map(|s| (s / tau).exp()).sum::<f64>();
        -(num / den).ln()
    }

    #[test]
    fn closed_form_values() {
        let l = nce_loss(&[1.0, 0.0], &[1.0, 0.0], &[[-1.0, 0.0]], 1.0).unwrap();
        close(l.loss, (1.0 + (-2.0f64).exp()).ln(), 1e-12);
        close(l.loss, 0.126928, 1e-6);
        // cos⁺ = 0.8, cos⁻ = 0.2
        let q = [1.0, 0.0];
        let p = [0.8, 0.6];
        let n = [0.2, (1.0f64 - 0.04).sqrt()];
        let l = nce_loss(&q, &p, &[n], 0.1).unwrap();
        close(l.loss, 0.002476, 1e-6);
        let l = nce_loss::<[f64; 2]>(&q, &p, &[], 0.1).unwrap();
        assert_eq!(l.loss, 0.0);
        assert!(l.flagged);
    }

    #[test]
    fn matches_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let v = |rng: &mut ChaCha8Rng| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let q = v(&mut rng);
            let p = v(&mut rng);
            let negs: Vec<Vec<f64>> = (0..4).map(|_| v(&mut rng)).collect();
            let tau = rng.random_range(0.05..1.0);
            let cos = |a: &[f64], b: &[f64]| crate::embedding::cosine(a, b).unwrap();
            let expect = oracle(cos(&q, &p), &negs.iter().map(|n| cos(&q, n)).collect::<Vec<_>>(), tau);
            close(nce_loss(&q, &p, &negs, tau).unwrap().loss, expect, 1e-10);
        }
    }

    #[test]
    fn loss_decreases_as_positive_similarity_rises() {
        let negs = [0.3, -0.2, 0.5];
        let mut prev = f64::INFINITY;
        for i in 0..=40 {
            let s = -1.0 + i as f64 * 0.05;
            let l = nce_terms(s, &negs, 0.2).loss;
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
    }

    #[test]
    fn mrl_degenerate_and_compositional() {
        let q = [0.1, 0.5, -0.3, 0.9];
        let p = [0.2, 0.1, 0.4, -0.3];
        let n = [[1.0, 0.0, 0.5, 0.5]];
        let full = nce_loss(&q, &p, &n, 0.07).unwrap();
        let mrl = nce_mrl_loss(&q, &p, &n, &MrlDims::full_only(4), 0.07).unwrap();
        assert_eq!(full.loss, mrl.loss);
        assert_eq!(full.grads, mrl.grads);

        // Constant vectors: both prefixes have identical cosines.
        let c = [0.5; 4];
        let nc = [[-2.0; 4]];
        let half = nce_loss(&c[..2], &c[..2], &[&nc[0][..2]], 0.5).unwrap().loss;
        let two = nce_mrl_loss(&c, &c, &nc, &MrlDims::new(vec![2, 4]).unwrap(), 0.5).unwrap().loss;
        close(two, 2.0 * half, 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = |rng: &mut ChaCha8Rng| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (q, p) = (v(&mut rng), v(&mut rng));
        let negs: Vec<Vec<f64>> = (0..3).map(|_| v(&mut rng)).collect();
        let dims = MrlDims::new(vec![2, 4, 8]).unwrap();
        let sum: f64 = [2, 4, 8]
            .iter()
            .map(|&d| {
                let ns: Vec<&[f64]> = negs.iter().map(|n| &n[..d]).collect();
                nce_loss(&q[..d], &p[..d], &ns, 0.3).unwrap().loss
            })
            .sum();
        close(nce_mrl_loss(&q, &p, &negs, &dims, 0.3).unwrap().loss, sum, 1e-12);
    }

    #[test]
    fn hard_variant() {
        let q = [1.0, 0.0];
        let p = [0.6, 0.8];
        let hard = [[0.5, (0.75f64).sqrt()]];
        let rand = [[-0.5, (0.75f64).sqrt()]];
        let empty: [[f64; 2]; 0] = [];
        let plain = nce_loss(&q, &p, &rand, 0.4).unwrap();
        let h = hard_contrastive_loss(&q, &p, &empty, &rand, 0.4).unwrap();
        assert_eq!(plain.loss, h.loss);
        assert_eq!(plain.grads.get("negative.0"), h.grads.get("random.0"));

        let p9 = [0.9, (1.0f64 - 0.81).sqrt()];
        let l = hard_contrastive_loss(&q, &p9, &hard, &rand, 1.0).unwrap().loss;
        close(l, oracle(0.9, &[0.5, -0.5], 1.0), 1e-12);
        close(l, 0.650718, 1e-6);

        let twice = hard_contrastive_loss(&q, &p9, &[hard[0], hard[0]], &rand, 1.0).unwrap().loss;
        assert!(twice > l);
        let none = hard_contrastive_loss(&q, &p9, &empty, &empty, 1.0).unwrap();
        assert!(none.flagged && none.loss == 0.0);
    }

    #[test]
    fn rejects_bad_tau_and_dims() {
        assert!(nce_loss(&[1.0], &[1.0], &[[1.0]], 0.0).is_err());
        assert!(nce_loss(&[1.0], &[1.0, 0.0], &[[1.0]], 0.1).is_err());
    }
}
