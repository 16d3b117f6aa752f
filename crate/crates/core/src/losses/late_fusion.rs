use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GradientBundle;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `z = σ(W[v; n_m] + b)`, `out = z ⊙ v + (1 − z) ⊙ n_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateFusionGate {
    /// `d × 2d`
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionForward {
    pub out: Vec<f64>,
    pub gate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub d_v: Vec<f64>,
    pub d_n_m: Vec<f64>,
    pub d_weight: Tensor,
    pub d_bias: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl LateFusionGate {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(dim, 2 * dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::gaussian(dim, 2 * dim, std, rng),
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    fn check(&self, v: &[f64], n_m: &[f64]) -> Result<()> {
        Error::check_dim(self.dim(), v.len())?;
        Error::check_dim(self.dim(), n_m.len())?;
        Error::check_dim(2 * self.dim(), self.weight.cols())
    }

    pub fn forward(&self, v: &[f64], n_m: &[f64]) -> Result<FusionForward> {
        self.check(v, n_m)?;
        let x: Vec<f64> = v.iter().chain(n_m).copied().collect();
        let gate: Vec<f64> = self.weight.matvec(&x).iter().zip(&self.bias).map(|(a, b)| sigmoid(a + b)).collect();
        let out = gate.iter().zip(v.iter().zip(n_m)).map(|(z, (a, b))| z * a + (1.0 - z) * b).collect();
        Ok(FusionForward { out, gate })
    }

    /// Backpropagates `d_out` through a forward pass computed on the same
    /// inputs.
    pub fn backward(&self, v: &[f64], n_m: &[f64], fwd: &FusionForward, d_out: &[f64]) -> FusionGrads {
        let d = self.dim();
        let g_pre: Vec<f64> = (0..d)
            .map(|i| d_out[i] * (v[i] - n_m[i]) * fwd.gate[i] * (1.0 - fwd.gate[i]))
            .collect();
        let x: Vec<f64> = v.iter().chain(n_m).copied().collect();
        let mut d_weight = Tensor::zeros(d, 2 * d);
        d_weight.add_outer(1.0, &g_pre, &x);
        let d_x = self.weight.matvec_t(&g_pre);
        FusionGrads {
            d_v: (0..d).map(|i| d_x[i] + fwd.gate[i] * d_out[i]).collect(),
            d_n_m: (0..d).map(|i| d_x[d + i] + (1.0 - fwd.gate[i]) * d_out[i]).collect(),
            d_weight,
            d_bias: g_pre,
        }
    }
}

/// Gated fusion of `v` and `n_m`. The bundle holds the gradient of
/// `⟨upstream, out⟩` under keys `v`, `n_m`, `gate.weight`, `gate.bias`.
pub fn late_fusion(v: &[f64], n_m: &[f64], gate: &LateFusionGate, upstream: &[f64]) -> Result<(Embedding, GradientBundle)> {
    let fwd = gate.forward(v, n_m)?;
    Error::check_dim(gate.dim(), upstream.len())?;
    let g = gate.backward(v, n_m, &fwd, upstream);
    let mut grads = GradientBundle::new();
    grads.insert("v", g.d_v);
    grads.insert("n_m", g.d_n_m);
    grads.insert("gate.weight", g.d_weight.into_vec());
    grads.insert("gate.bias", g.d_bias);
    Ok((Embedding::new(fwd.out)?, grads))
}
