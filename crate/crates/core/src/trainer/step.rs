use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::{add_into, add_scaled_into, Encoded, ToyEncoder, ViewGrads};
use super::optim::OptimizerState;
use crate::datasets::{enumerate_patterns, DatasetSpec, ItemRecord, MetaTask, ModalitySet, Pattern};
use crate::error::{Error, Result};
use crate::losses::{
    cosent_terms, cosine_with_grad, micl_loss, nce_loss, nce_mrl_loss, FusionForward, GradientBundle, LossWeights,
    ModalViews, TAU_CLASSIFICATION, TAU_RETRIEVAL,
};

/// One labelled pair with its optional mined negatives and graded targets.
#[derive(Debug, Clone)]
pub struct TrainExample<'a> {
    pub query: &'a ItemRecord,
    pub target: &'a ItemRecord,
    pub hard_negatives: Vec<&'a ItemRecord>,
    /// Targets with graded relevance for this query; ordered pairs with
    /// distinct scores feed the ranking term.
    pub graded: Vec<(&'a ItemRecord, f64)>,
}

impl<'a> TrainExample<'a> {
    pub fn new(query: &'a ItemRecord, target: &'a ItemRecord) -> Self {
        Self {
            query,
            target,
            hard_negatives: Vec::new(),
            graded: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSettings {
    pub weights: LossWeights,
    /// Fixed temperature of the ranking term.
    pub cosent_tau: f64,
}

impl Default for StepSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            cosent_tau: TAU_CLASSIFICATION,
        }
    }
}

/// Per-dataset context: the dataset's patterns and instruction tokens, and
/// the key of its learnable temperature.
#[derive(Debug, Clone, Copy)]
pub struct BatchContext<'a> {
    pub spec: &'a DatasetSpec,
    pub settings: &'a StepSettings,
}

impl BatchContext<'_> {
    pub fn tau_key(&self) -> &str {
        &self.spec.name
    }
}

pub fn initial_tau(task: MetaTask) -> f64 {
    match task {
        MetaTask::Cls => TAU_CLASSIFICATION,
        _ => TAU_RETRIEVAL,
    }
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: GradientBundle,
    /// Some term had nothing to contrast against.
    pub flagged: bool,
    pub patterns: Vec<Pattern>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
}

/// An encoded item inside one pattern group, with gradient accumulators.
struct Node {
    enc: Encoded,
    fused: Option<FusionForward>,
    grad: ViewGrads,
    grad_fused: Vec<f64>,
}

impl Node {
    fn fused(&self) -> &[f64] {
        self.fused.as_ref().map_or(self.enc.n_m(), |f| &f.out)
    }
}

struct Group {
    pattern: Pattern,
    queries: Vec<usize>,
    targets: Vec<usize>,
    hard: Vec<Vec<usize>>,
    graded: Vec<Vec<(usize, f64)>>,
    nodes: Vec<Node>,
}

/// What to encode for one node: record, instruction, view.
type Job<'a> = (&'a ItemRecord, usize, ModalitySet);

fn plan_group<'a>(batch: &[TrainExample<'a>], spec: &DatasetSpec, pattern: Pattern) -> Option<(Vec<Job<'a>>, Group)> {
    let mut jobs: Vec<Job<'a>> = Vec::new();
    let mut g = Group {
        pattern,
        queries: Vec::new(),
        targets: Vec::new(),
        hard: Vec::new(),
        graded: Vec::new(),
        nodes: Vec::new(),
    };
    let (qi, ti) = (spec.instruction_id, spec.target_instruction());
    let target_view = |query: &ItemRecord, other: &ItemRecord| {
        let q = query.modalities().intersect(spec.query_modalities);
        let t = other.modalities().intersect(spec.target_modalities);
        pattern.views(q, t).map(|(_, tv)| tv)
    };
    for ex in batch {
        let Some(pair) = enumerate_patterns(ex.query, ex.target, spec).into_iter().find(|p| p.pattern == pattern)
        else {
            continue;
        };
        g.queries.push(jobs.len());
        jobs.push((ex.query, qi, pair.query_view));
        g.targets.push(jobs.len());
        jobs.push((ex.target, ti, pair.target_view));
        let mut hard = Vec::new();
        for neg in &ex.hard_negatives {
            if let Some(view) = target_view(ex.query, neg) {
                hard.push(jobs.len());
                jobs.push((neg, ti, view));
            }
        }
        g.hard.push(hard);
        let mut graded = Vec::new();
        for (rec, score) in &ex.graded {
            if let Some(view) = target_view(ex.query, rec) {
                graded.push((jobs.len(), *score));
                jobs.push((rec, ti, view));
            }
        }
        g.graded.push(graded);
    }
    (!g.queries.is_empty()).then_some((jobs, g))
}

/// Combined loss of one single-dataset batch, averaged over anchors within
/// each satisfiable pattern and then over patterns, with gradients for
/// every encoder parameter.
///
/// Per anchor: Matryoshka NCE against every other target in the group plus
/// the anchor's hard negatives; COSENT over its graded targets; mICL
/// against the other targets' same-modality views; and NCE over gated
/// late-fusion outputs.
pub fn batch_loss(enc: &ToyEncoder, batch: &[TrainExample], ctx: &BatchContext) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let key = ctx.tau_key();
    let tau = enc
        .loss
        .tau(key)
        .ok_or_else(|| Error::invalid(format!("no temperature registered for `{key}`")))?;
    let w = &ctx.settings.weights;
    w.validate()?;
    let mrl = enc.config.mrl()?;

    let mut groups = Vec::new();
    for &pattern in &ctx.spec.patterns {
        let Some((jobs, mut group)) = plan_group(batch, ctx.spec, pattern) else {
            continue;
        };
        group.nodes = jobs
            .par_iter()
            .map(|&(rec, inst, view)| {
                let e = enc.forward(rec, Some(inst), view)?;
                let fused = if w.beta > 0.0 { enc.fuse(&e)? } else { None };
                Ok(Node {
                    grad: ViewGrads::zeros(enc.dim()),
                    grad_fused: vec![0.0; enc.dim()],
                    enc: e,
                    fused,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        groups.push(group);
    }
    if groups.is_empty() {
        return Err(Error::invalid(format!(
            "no pattern of dataset `{}` is satisfiable by this batch",
            ctx.spec.name
        )));
    }

    let mut total = 0.0;
    let mut d_tau = 0.0;
    let mut flagged = false;
    let n_groups = groups.len() as f64;
    let mut grads = GradientBundle::new();
    for g in &mut groups {
        let scale = 1.0 / (g.queries.len() as f64 * n_groups);
        for a in 0..g.queries.len() {
            let (q, t) = (g.queries[a], g.targets[a]);
            let in_batch: Vec<usize> = g.targets.iter().copied().filter(|&j| j != t).collect();
            let negs: Vec<usize> = in_batch.iter().chain(&g.hard[a]).copied().collect();

            let nm = |i: usize| g.nodes[i].enc.n_m();
            let neg_values: Vec<&[f64]> = negs.iter().map(|&i| nm(i)).collect();
            let out = nce_mrl_loss(nm(q), nm(t), &neg_values, &mrl, tau)?;
            total += scale * out.loss;
            flagged |= out.flagged;
            d_tau += scale * out.grads.scalar("tau").unwrap_or(0.0);
            let route = |key: &str, node: usize, nodes: &mut [Node]| {
                if let Some(gr) = out.grads.get(key) {
                    add_scaled_into(&mut nodes[node].grad.n_m, scale, gr);
                }
            };
            route("query", q, &mut g.nodes);
            route("positive", t, &mut g.nodes);
            for (k, &n) in negs.iter().enumerate() {
                route(&format!("negative.{k}"), n, &mut g.nodes);
            }

            if w.lambda > 0.0 {
                ranking_term(g, a, ctx.settings.cosent_tau, scale * w.lambda, &mut total);
            }

            if w.alpha > 0.0 {
                let views: Vec<ModalViews> = in_batch.iter().map(|&i| g.nodes[i].enc.views.clone()).collect();
                let out = micl_loss(&g.nodes[q].enc.views, &g.nodes[t].enc.views, &views, tau)?;
                let s = scale * w.alpha;
                total += s * out.loss;
                d_tau += s * out.grads.scalar("tau").unwrap_or(0.0);
                for (key, gr) in out.grads.iter() {
                    let Some((role, modality)) = key.rsplit_once('.') else {
                        continue;
                    };
                    let node = match role {
                        "query" => q,
                        "positive" => t,
                        _ => {
                            let i: usize = role.trim_start_matches("negative.").parse().expect("indexed negative");
                            in_batch[i]
                        }
                    };
                    let scaled: Vec<f64> = gr.iter().map(|v| s * v).collect();
                    match modality {
                        "vision" => g.nodes[node].grad.add_n_v(&scaled),
                        _ => g.nodes[node].grad.add_n_t(&scaled),
                    }
                }
            }

            if w.beta > 0.0 {
                let neg_values: Vec<&[f64]> = in_batch.iter().map(|&i| g.nodes[i].fused()).collect();
                let out = nce_loss(g.nodes[q].fused(), g.nodes[t].fused(), &neg_values, tau)?;
                let s = scale * w.beta;
                total += s * out.loss;
                d_tau += s * out.grads.scalar("tau").unwrap_or(0.0);
                let mut route = |key: &str, node: usize| {
                    if let Some(gr) = out.grads.get(key) {
                        add_scaled_into(&mut g.nodes[node].grad_fused, s, gr);
                    }
                };
                route("query", q);
                route("positive", t);
                for (k, &n) in in_batch.iter().enumerate() {
                    route(&format!("negative.{k}"), n);
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }

    for g in &mut groups {
        for node in &mut g.nodes {
            match &node.fused {
                Some(f) => {
                    let v = node.enc.views.v.as_deref().expect("fused nodes have vision");
                    let fg = enc.gate.backward(v, node.enc.n_m(), f, &node.grad_fused);
                    node.grad.add_n_v(&fg.d_v);
                    add_into(&mut node.grad.n_m, &fg.d_n_m);
                    let d = enc.dim();
                    grads.accumulate_prefix("gate.weight", 2 * d * d, fg.d_weight.as_slice());
                    grads.accumulate_prefix("gate.bias", d, &fg.d_bias);
                }
                None => {
                    let gf = std::mem::take(&mut node.grad_fused);
                    add_into(&mut node.grad.n_m, &gf);
                }
            }
            enc.backward(&node.enc, &node.grad, &mut grads);
        }
    }
    // d/d(log τ) = τ · d/dτ
    grads.insert(format!("log_tau.{key}"), vec![tau * d_tau]);
    Ok(BatchLoss {
        loss: total,
        grads,
        flagged,
        patterns: groups.iter().map(|g| g.pattern).collect(),
    })
}

/// COSENT over the anchor's graded targets, full dimension, fixed τ.
fn ranking_term(g: &mut Group, anchor: usize, tau: f64, scale: f64, total: &mut f64) {
    let graded = &g.graded[anchor];
    if graded.len() < 2 {
        return;
    }
    let q = g.queries[anchor];
    let cos: Vec<_> = graded
        .iter()
        .map(|&(i, _)| cosine_with_grad(g.nodes[q].enc.n_m(), g.nodes[i].enc.n_m()))
        .collect();
    let mut pairs = Vec::new();
    let mut sims = Vec::new();
    for (a, (_, sa)) in graded.iter().enumerate() {
        for (b, (_, sb)) in graded.iter().enumerate() {
            if sa > sb {
                pairs.push((a, b));
                sims.push((cos[a].0, cos[b].0));
            }
        }
    }
    if pairs.is_empty() {
        return;
    }
    let terms = cosent_terms(&sims, tau);
    *total += scale * terms.loss;
    let mut d_sim = vec![0.0; graded.len()];
    for (k, &(a, b)) in pairs.iter().enumerate() {
        d_sim[a] += terms.d_high[k];
        d_sim[b] += terms.d_low[k];
    }
    for (j, &(node, _)) in graded.iter().enumerate() {
        let s = scale * d_sim[j];
        add_scaled_into(&mut g.nodes[q].grad.n_m, s, &cos[j].1);
        add_scaled_into(&mut g.nodes[node].grad.n_m, s, &cos[j].2);
    }
}

/// One optimisation step on a single-dataset batch.
pub fn train_step(
    enc: &mut ToyEncoder,
    opt: &mut OptimizerState,
    batch: &[TrainExample],
    ctx: &BatchContext,
) -> Result<StepMetrics> {
    enc.loss.ensure(ctx.tau_key(), initial_tau(ctx.spec.meta_task));
    let out = batch_loss(enc, batch, ctx)?;
    let info = opt.apply(enc, &out.grads)?;
    Ok(StepMetrics {
        loss: out.loss,
        grad_norm: info.grad_norm,
        clipped_norm: info.clipped_norm,
        lr: info.lr,
    })
}
