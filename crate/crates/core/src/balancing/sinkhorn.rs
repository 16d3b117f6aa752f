use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Marginal error below which the iteration counts as converged.
pub const SINKHORN_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_ITERS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub plan: Tensor,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest absolute deviation of any row or column sum from its marginal.
    pub marginal_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornScore {
    pub score: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn logsumexp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Entropic optimal transport between uniform marginals, solved with
/// log-domain Sinkhorn updates so small `epsilon` does not underflow.
pub fn sinkhorn_plan(cost: &Tensor, epsilon: f64, iters: usize) -> Result<TransportPlan> {
    let (m, n) = cost.shape();
    if m == 0 || n == 0 {
        return Err(Error::Empty("cost matrix"));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("cost matrix"));
    }
    let log_a = -(m as f64).ln();
    let log_b = -(n as f64).ln();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let plan_of = |f: &[f64], g: &[f64]| {
        let mut p = Tensor::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                p.set(i, j, ((f[i] + g[j] - cost.get(i, j)) / epsilon).exp());
            }
        }
        p
    };
    let marginal_error = |p: &Tensor| {
        let rows = (0..m).map(|i| (p.row(i).iter().sum::<f64>() - 1.0 / m as f64).abs());
        let cols = (0..n).map(|j| ((0..m).map(|i| p.get(i, j)).sum::<f64>() - 1.0 / n as f64).abs());
        rows.chain(cols).fold(0.0, f64::max)
    };

    let mut iterations = 0;
    let mut err = f64::INFINITY;
    while iterations < iters {
        iterations += 1;
        for i in 0..m {
            f[i] = epsilon * log_a - epsilon * logsumexp((0..n).map(|j| (g[j] - cost.get(i, j)) / epsilon));
        }
        for j in 0..n {
            g[j] = epsilon * log_b - epsilon * logsumexp((0..m).map(|i| (f[i] - cost.get(i, j)) / epsilon));
        }
        err = marginal_error(&plan_of(&f, &g));
        if err < SINKHORN_TOLERANCE {
            break;
        }
    }
    let mut plan = plan_of(&f, &g);
    let total: f64 = plan.as_slice().iter().sum();
    plan.as_mut_slice().iter_mut().for_each(|p| *p /= total);
    Ok(TransportPlan {
        plan,
        row_marginal: vec![1.0 / m as f64; m],
        col_marginal: vec![1.0 / n as f64; n],
        converged: err < SINKHORN_TOLERANCE,
        iterations,
        marginal_error: err,
    })
}

/// Reduces a centroid cosine matrix to one similarity: the transport plan
/// on cost `1 − C`, then `Σ P ⊙ C`. Non-convergence returns the last
/// iterate with `converged = false`.
pub fn sinkhorn_scalar(similarity: &Tensor, epsilon: f64, iters: usize) -> Result<SinkhornScore> {
    if similarity.as_slice().iter().any(|c| !(-1.0..=1.0).contains(c)) {
        return Err(Error::invalid("similarity entries must lie in [-1, 1]"));
    }
    let mut cost = similarity.clone();
    cost.as_mut_slice().iter_mut().for_each(|c| *c = 1.0 - *c);
    let tp = sinkhorn_plan(&cost, epsilon, iters)?;
    // Weighted mean with both sums in one pass, so a constant matrix gives
    // exactly that constant.
    let (mut num, mut den) = (0.0, 0.0);
    for (p, c) in tp.plan.as_slice().iter().zip(similarity.as_slice()) {
        num += p * c;
        den += p;
    }
    let lo = similarity.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = similarity.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SinkhornScore {
        score: (num / den).clamp(lo, hi),
        converged: tp.converged,
        iterations: tp.iterations,
    })
}
