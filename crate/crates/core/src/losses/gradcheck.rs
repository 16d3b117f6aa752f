use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    combined_loss, cosent_loss, cosine_with_grad, hard_contrastive_loss, late_fusion, micl_loss, nce_loss,
    nce_mrl_loss, GradientBundle, LateFusionGate, LossComponents, LossOutput, LossWeights, ModalViews,
};
use crate::embedding::MrlDims;
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Compares `analytic` against central differences of `f` at `x`.
/// Returns the largest `|numeric − analytic| / max(1e-8, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    Error::check_dim(x.len(), analytic.len())?;
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("loss under finite differences"));
        }
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((numeric - analytic[i]).abs() / analytic[i].abs().max(1e-8));
    }
    Ok(worst)
}

/// Whether central differences at step `h` can resolve `analytic` to the
/// check tolerance. Loss values are only representable to one ulp, so a
/// numeric derivative carries an absolute error of about `ulp(f) / 2h`;
/// every nonzero coordinate must sit well above that. Exact zeros are
/// always checkable since unused inputs leave `f` bit-identical.
pub fn resolvable(loss: f64, analytic: &[f64], h: f64) -> bool {
    let floor = RESOLUTION_MARGIN * loss.abs().max(1.0) * f64::EPSILON / (2.0 * h) / GRAD_TOLERANCE;
    analytic.iter().all(|&g| g == 0.0 || g.abs() >= floor)
}

/// Safety factor between the rounding floor and the smallest accepted
/// gradient coordinate.
const RESOLUTION_MARGIN: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub instances: usize,
    /// Random draws skipped because some gradient coordinate fell below
    /// the finite-difference resolution.
    pub unresolvable_skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckEntry {
    pub fn new(name: impl Into<String>, instances: usize, unresolvable_skipped: usize, max_rel_error: f64) -> Self {
        Self {
            name: name.into(),
            instances,
            unresolvable_skipped,
            max_rel_error,
            passed: instances > 0 && max_rel_error < GRAD_TOLERANCE,
        }
    }
}

type Inputs = BTreeMap<String, Vec<f64>>;

// Random instances stay out of saturated regimes (gate sigmoids, sharp
// softmaxes): there the true gradient drops below what a central
// difference at h = 1e-5 can resolve in f64, about 1e-10 absolute.
const GATE_SCALE: f64 = 0.25;

/// Named inputs flattened into one coordinate vector.
struct Instance {
    layout: Vec<(String, usize)>,
    x: Vec<f64>,
}

impl Instance {
    fn new(parts: Vec<(String, Vec<f64>)>) -> Self {
        let layout = parts.iter().map(|(k, v)| (k.clone(), v.len())).collect();
        let x = parts.into_iter().flat_map(|(_, v)| v).collect();
        Self { layout, x }
    }

    fn unpack(&self, x: &[f64]) -> Inputs {
        let mut out = Inputs::new();
        let mut at = 0;
        for (k, n) in &self.layout {
            out.insert(k.clone(), x[at..at + n].to_vec());
            at += n;
        }
        out
    }

    /// `None` when the instance is not [`resolvable`].
    fn check(&self, f: impl Fn(&Inputs) -> Result<LossOutput>) -> Result<Option<f64>> {
        let at = f(&self.unpack(&self.x))?;
        let analytic = at.grads.flatten(&self.layout);
        if !resolvable(at.loss, &analytic, FD_STEP) {
            return Ok(None);
        }
        finite_diff_check(|x| Ok(f(&self.unpack(x))?.loss), &self.x, &analytic, FD_STEP).map(Some)
    }
}

fn vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    scaled(rng, dim, 1.0)
}

fn scaled(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

fn negs(inputs: &Inputs, prefix: &str, count: usize) -> Vec<Vec<f64>> {
    (0..count).map(|i| inputs[&format!("{prefix}.{i}")].clone()).collect()
}

fn retrieval_parts(rng: &mut ChaCha8Rng, dim: usize, n_neg: usize) -> Vec<(String, Vec<f64>)> {
    let mut parts = vec![("query".to_string(), vector(rng, dim)), ("positive".to_string(), vector(rng, dim))];
    for i in 0..n_neg {
        parts.push((format!("negative.{i}"), vector(rng, dim)));
    }
    parts.push(("tau".to_string(), vec![rng.random_range(0.2..1.0)]));
    parts
}

fn views(inputs: &Inputs, role: &str) -> ModalViews {
    ModalViews {
        n_v: inputs.get(&format!("{role}.vision")).cloned(),
        n_t: inputs.get(&format!("{role}.text")).cloned(),
        n_m: vec![0.0],
        v: None,
    }
}

fn gate_of(inputs: &Inputs, dim: usize) -> Result<LateFusionGate> {
    Ok(LateFusionGate {
        weight: Tensor::from_vec(dim, 2 * dim, inputs["gate.weight"].clone())?,
        bias: inputs["gate.bias"].clone(),
    })
}

/// `cosent` over `cos(query, positive) ≻ cos(query, negative.i)`, chained
/// back to the vectors.
fn ranked_cosent(inputs: &Inputs, n_neg: usize, tau: f64) -> Result<LossOutput> {
    let q = &inputs["query"];
    let mut keys = vec!["positive".to_string()];
    keys.extend((0..n_neg).map(|i| format!("negative.{i}")));
    let cos: Vec<_> = keys.iter().map(|k| cosine_with_grad(q, &inputs[k])).collect();
    let sims: Vec<(String, f64)> = keys.iter().zip(&cos).map(|(k, c)| (k.clone(), c.0)).collect();
    let order: Vec<(String, String)> = keys[1..].iter().map(|k| ("positive".to_string(), k.clone())).collect();
    let inner = cosent_loss(&sims, &order, tau)?;
    let mut grads = GradientBundle::new();
    for (k, (_, dq, dt)) in keys.iter().zip(&cos) {
        let w = inner.grads.scalar(&format!("sim.{k}")).unwrap();
        grads.accumulate_prefix("query", q.len(), &dq.iter().map(|g| w * g).collect::<Vec<_>>());
        grads.insert(k.clone(), dt.iter().map(|g| w * g).collect());
    }
    grads.insert("tau", vec![inner.grads.scalar("tau").unwrap()]);
    Ok(LossOutput { grads, ..inner })
}

/// Late fusion of `(query.vision, query)` scored with NCE against the
/// positive and negatives.
fn fused_nce(inputs: &Inputs, dim: usize, n_neg: usize, tau: f64) -> Result<LossOutput> {
    let gate = gate_of(inputs, dim)?;
    let v = &inputs["query.vision"];
    let n_m = &inputs["query"];
    let fwd = gate.forward(v, n_m)?;
    let inner = nce_loss(&fwd.out, &inputs["positive"], &negs(inputs, "negative", n_neg), tau)?;
    let g = gate.backward(v, n_m, &fwd, inner.grads.get("query").unwrap());
    let mut grads = inner.grads.clone();
    grads.insert("query", g.d_n_m);
    grads.insert("query.vision", g.d_v);
    grads.insert("gate.weight", g.d_weight.into_vec());
    grads.insert("gate.bias", g.d_bias);
    Ok(LossOutput { grads, ..inner })
}

/// Running tally for one named check.
#[derive(Default)]
pub(crate) struct Tally {
    pub accepted: usize,
    pub skipped: usize,
    pub worst: f64,
}

impl Tally {
    pub fn record(&mut self, target: usize, outcome: Option<f64>) {
        if self.accepted >= target {
            return;
        }
        match outcome {
            Some(err) => {
                self.accepted += 1;
                self.worst = self.worst.max(err);
            }
            None => self.skipped += 1,
        }
    }
}

/// Finite-difference certification of every loss on `instances` resolvable
/// random inputs of dimension at most 8.
pub fn loss_gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tallies: BTreeMap<&str, Tally> = BTreeMap::new();
    let names = ["nce", "nce_mrl", "hard_contrastive", "cosent", "micl", "late_fusion", "combined"];
    for n in names {
        tallies.insert(n, Tally::default());
    }
    let mut rounds = 0;
    while tallies.values().any(|t| t.accepted < instances) && rounds < 20 * instances.max(1) {
        rounds += 1;
        let mut record = |name: &'static str, outcome: Option<f64>| {
            tallies.get_mut(name).expect("registered").record(instances, outcome);
        };
        let dim = rng.random_range(4..=8);
        let n_neg = rng.random_range(1..=4);

        let inst = Instance::new(retrieval_parts(&mut rng, dim, n_neg));
        record(
            "nce",
            inst.check(|i| nce_loss(&i["query"], &i["positive"], &negs(i, "negative", n_neg), i["tau"][0]))?,
        );

        let dims = MrlDims::new(vec![dim / 2, dim])?;
        record(
            "nce_mrl",
            inst.check(|i| nce_mrl_loss(&i["query"], &i["positive"], &negs(i, "negative", n_neg), &dims, i["tau"][0]))?,
        );

        let n_hard = rng.random_range(0..=n_neg);
        let hard_parts: Vec<(String, Vec<f64>)> = retrieval_parts(&mut rng, dim, n_neg)
            .into_iter()
            .map(|(k, v)| match k.strip_prefix("negative.") {
                Some(i) => {
                    let i: usize = i.parse().unwrap();
                    if i < n_hard {
                        (format!("hard.{i}"), v)
                    } else {
                        (format!("random.{}", i - n_hard), v)
                    }
                }
                None => (k, v),
            })
            .collect();
        record(
            "hard_contrastive",
            Instance::new(hard_parts).check(|i| {
                hard_contrastive_loss(
                    &i["query"],
                    &i["positive"],
                    &negs(i, "hard", n_hard),
                    &negs(i, "random", n_neg - n_hard),
                    i["tau"][0],
                )
            })?,
        );

        let n_sims = rng.random_range(2..=6);
        let ids: Vec<String> = (0..n_sims).map(|i| format!("p{i}")).collect();
        let mut parts: Vec<(String, Vec<f64>)> = ids
            .iter()
            .map(|id| (format!("sim.{id}"), vec![rng.random_range(-1.0..1.0)]))
            .collect();
        parts.push(("tau".into(), vec![rng.random_range(0.2..1.0)]));
        let order: Vec<(String, String)> = (0..rng.random_range(1..=8))
            .map(|_| {
                let a = rng.random_range(0..n_sims);
                let b = (a + rng.random_range(1..n_sims)) % n_sims;
                (ids[a].clone(), ids[b].clone())
            })
            .collect();
        record(
            "cosent",
            Instance::new(parts).check(|i| {
                let sims: Vec<(String, f64)> = ids.iter().map(|id| (id.clone(), i[&format!("sim.{id}")][0])).collect();
                cosent_loss(&sims, &order, i["tau"][0])
            })?,
        );

        let mut parts = Vec::new();
        for role in ["query", "positive"] {
            parts.push((format!("{role}.vision"), vector(&mut rng, dim)));
            parts.push((format!("{role}.text"), vector(&mut rng, dim)));
        }
        for n in 0..n_neg {
            parts.push((format!("negative.{n}.vision"), vector(&mut rng, dim)));
            if rng.random_bool(0.7) {
                parts.push((format!("negative.{n}.text"), vector(&mut rng, dim)));
            }
        }
        parts.push(("tau".into(), vec![rng.random_range(0.2..1.0)]));
        record(
            "micl",
            Instance::new(parts).check(|i| {
                let batch: Vec<ModalViews> = (0..n_neg).map(|n| views(i, &format!("negative.{n}"))).collect();
                micl_loss(&views(i, "query"), &views(i, "positive"), &batch, i["tau"][0])
            })?,
        );

        let upstream = vector(&mut rng, dim);
        let parts = vec![
            ("v".to_string(), vector(&mut rng, dim)),
            ("n_m".to_string(), vector(&mut rng, dim)),
            ("gate.weight".to_string(), scaled(&mut rng, 2 * dim * dim, GATE_SCALE)),
            ("gate.bias".to_string(), scaled(&mut rng, dim, GATE_SCALE)),
        ];
        record(
            "late_fusion",
            Instance::new(parts).check(|i| {
                let (out, grads) = late_fusion(&i["v"], &i["n_m"], &gate_of(i, dim)?, &upstream)?;
                Ok(LossOutput {
                    loss: dot(&out, &upstream),
                    grads,
                    flagged: false,
                })
            })?,
        );

        let mut parts = retrieval_parts(&mut rng, dim, n_neg);
        for role in ["query", "positive"] {
            parts.push((format!("{role}.vision"), vector(&mut rng, dim)));
            parts.push((format!("{role}.text"), vector(&mut rng, dim)));
        }
        for n in 0..n_neg {
            parts.push((format!("negative.{n}.vision"), vector(&mut rng, dim)));
            parts.push((format!("negative.{n}.text"), vector(&mut rng, dim)));
        }
        parts.push(("gate.weight".into(), scaled(&mut rng, 2 * dim * dim, GATE_SCALE)));
        parts.push(("gate.bias".into(), scaled(&mut rng, dim, GATE_SCALE)));
        let weights = LossWeights {
            lambda: rng.random_range(0.5..2.0),
            alpha: rng.random_range(0.5..2.0),
            beta: rng.random_range(0.5..2.0),
        };
        let dims = MrlDims::new(vec![dim / 2, dim])?;
        record(
            "combined",
            Instance::new(parts).check(|i| {
                let tau = i["tau"][0];
                let batch: Vec<ModalViews> = (0..n_neg).map(|n| views(i, &format!("negative.{n}"))).collect();
                let c = LossComponents {
                    nce_mrl: nce_mrl_loss(&i["query"], &i["positive"], &negs(i, "negative", n_neg), &dims, tau)?,
                    cosent: Some(ranked_cosent(i, n_neg, tau)?),
                    micl: Some(micl_loss(&views(i, "query"), &views(i, "positive"), &batch, tau)?),
                    late_fusion: Some(fused_nce(i, dim, n_neg, tau)?),
                };
                combined_loss(&c, &weights)
            })?,
        );
    }
    Ok(tallies
        .into_iter()
        .map(|(name, t)| GradCheckEntry::new(name, t.accepted, t.skipped, t.worst))
        .collect())
}
