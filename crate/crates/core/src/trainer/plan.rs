use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::ToyEncoder;
use super::optim::{draw_dataset, validate_weights, OptimizerConfig, OptimizerState};
use super::step::{initial_tau, train_step, BatchContext, StepSettings, TrainExample};
use crate::datasets::{DatasetSpec, GoldPair, GradedLabel, ItemRecord, ModalitySet};
use crate::embedding::{Embedding, EmbeddingStore};
use crate::error::{Error, Result};
use crate::mining::{mine, HardNegativePool, PoolConfig, DEFAULT_HARD_NEGATIVES, DEFAULT_PAIR_CAP};

/// Item records by id.
pub type Catalog = HashMap<String, ItemRecord>;

pub fn catalog(items: impl IntoIterator<Item = ItemRecord>) -> Result<Catalog> {
    let mut c = Catalog::new();
    for r in items {
        let id = r.id.clone();
        if c.insert(id.clone(), r).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(c)
}

fn lookup<'a>(catalog: &'a Catalog, id: &str) -> Result<&'a ItemRecord> {
    catalog.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
}

/// One dataset's training pairs and graded labels.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub spec: DatasetSpec,
    pub pairs: Vec<GoldPair>,
    /// Graded targets per query.
    pub graded: BTreeMap<String, Vec<(String, f64)>>,
}

impl TrainingSet {
    pub fn new(spec: DatasetSpec, pairs: Vec<GoldPair>) -> Result<Self> {
        spec.validate()?;
        if pairs.is_empty() {
            return Err(Error::invalid(format!("dataset `{}` has no pairs", spec.name)));
        }
        Ok(Self {
            spec,
            pairs,
            graded: BTreeMap::new(),
        })
    }

    /// Attaches graded labels whose query appears in this set.
    pub fn with_graded(mut self, labels: &[GradedLabel]) -> Self {
        let queries: std::collections::HashSet<&str> = self.pairs.iter().map(|p| p.query.as_str()).collect();
        for l in labels.iter().filter(|l| queries.contains(l.query.as_str())) {
            self.graded.entry(l.query.clone()).or_default().push((l.target.clone(), l.score));
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardNegativeSettings {
    pub m: usize,
    pub cap: usize,
}

impl Default for HardNegativeSettings {
    fn default() -> Self {
        Self {
            m: DEFAULT_HARD_NEGATIVES,
            cap: DEFAULT_PAIR_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub datasets: Vec<String>,
    /// Sampling weight per entry of `datasets`; must sum to 1. May be left
    /// empty in a config and filled from a balancing report.
    #[serde(default)]
    pub weights: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
    /// Mine hard negatives once at stage entry.
    #[serde(default)]
    pub hard_negatives: Option<HardNegativeSettings>,
    #[serde(default)]
    pub loss: StepSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
    /// Schedule shape for every stage; `total_steps` is replaced by the
    /// stage's step count and momentum restarts at each stage.
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl StagePlan {
    pub fn validate(&self, sets: &[TrainingSet]) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("plan has no stages"));
        }
        for s in &self.stages {
            if s.steps == 0 || s.batch_size == 0 {
                return Err(Error::invalid(format!("stage `{}`: steps and batch_size must be >= 1", s.name)));
            }
            if s.datasets.len() != s.weights.len() {
                return Err(Error::invalid(format!(
                    "stage `{}`: {} datasets but {} weights",
                    s.name,
                    s.datasets.len(),
                    s.weights.len()
                )));
            }
            validate_weights(&s.weights).map_err(|e| Error::invalid(format!("stage `{}`: {e}", s.name)))?;
            for d in &s.datasets {
                if !sets.iter().any(|t| &t.spec.name == d) {
                    return Err(Error::invalid(format!("stage `{}`: unknown dataset `{d}`", s.name)));
                }
            }
            if let Some(h) = &s.hard_negatives {
                if h.m == 0 || h.cap == 0 {
                    return Err(Error::invalid(format!("stage `{}`: m and cap must be >= 1", s.name)));
                }
            }
            s.loss.weights.validate()?;
        }
        self.stage_optimizer(&self.stages[0]).validate()
    }

    fn stage_optimizer(&self, stage: &StageSpec) -> OptimizerConfig {
        OptimizerConfig {
            total_steps: stage.steps,
            warmup_steps: self.optimizer.warmup_steps.min(stage.steps),
            ..self.optimizer.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningSummary {
    pub dataset: String,
    pub lambda_star: f64,
    pub f1: f64,
    pub mean_pool_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub steps: usize,
    pub losses: Vec<f64>,
    /// Batches drawn per dataset of the stage.
    pub draws: BTreeMap<String, usize>,
    pub mining: Vec<MiningSummary>,
    pub final_lr: f64,
}

impl StageReport {
    pub fn start_loss(&self) -> f64 {
        self.losses[0]
    }

    /// Mean over the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n.max(1))..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// `n_m` of every record under one instruction and modality view.
pub fn encode_records(
    enc: &ToyEncoder,
    records: &[&ItemRecord],
    instruction: usize,
    view: ModalitySet,
) -> Result<EmbeddingStore> {
    let rows: Vec<Embedding> = records
        .par_iter()
        .map(|r| Embedding::new(enc.forward(r, Some(instruction), view)?.views.n_m))
        .collect::<Result<_>>()?;
    EmbeddingStore::from_parts(records.iter().map(|r| r.id.clone()).collect(), rows)
}

const QUERY_PREFIX: &str = "query:";
const TARGET_PREFIX: &str = "target:";

/// Encodes both sides of a dataset with the current encoder and mines its
/// hard-negative pool, returning it with the F1 at the chosen threshold.
pub fn mine_training_set(
    enc: &ToyEncoder,
    set: &TrainingSet,
    catalog: &Catalog,
    settings: &HardNegativeSettings,
    seed: u64,
) -> Result<(HardNegativePool, f64)> {
    let mut q_ids: Vec<&str> = set.pairs.iter().map(|p| p.query.as_str()).collect();
    let mut t_ids: Vec<&str> = set.pairs.iter().map(|p| p.target.as_str()).collect();
    q_ids.sort_unstable();
    q_ids.dedup();
    t_ids.sort_unstable();
    t_ids.dedup();
    let recs = |ids: &[&str]| ids.iter().map(|id| lookup(catalog, id)).collect::<Result<Vec<_>>>();
    let spec = &set.spec;
    let qs = encode_records(enc, &recs(&q_ids)?, spec.instruction_id, spec.query_modalities)?;
    let ts = encode_records(enc, &recs(&t_ids)?, spec.target_instruction(), spec.target_modalities)?;
    let mut store = EmbeddingStore::new(enc.dim());
    for (prefix, side) in [(QUERY_PREFIX, &qs), (TARGET_PREFIX, &ts)] {
        for (id, row) in side.iter() {
            store.push(format!("{prefix}{id}"), row.clone())?;
        }
    }
    let pairs: Vec<GoldPair> = set
        .pairs
        .iter()
        .map(|p| GoldPair::new(format!("{QUERY_PREFIX}{}", p.query), format!("{TARGET_PREFIX}{}", p.target)))
        .collect();
    let outcome = mine(&pairs, &store, settings.m, PoolConfig { cap: settings.cap, seed })?;
    let f1 = outcome.sweep.f1_at_star;
    let mut pool = outcome.pool;
    pool.per_query = pool
        .per_query
        .into_iter()
        .map(|(q, list)| {
            let list = list
                .into_iter()
                .map(|mut s| {
                    s.target = s.target.trim_start_matches(TARGET_PREFIX).to_string();
                    s
                })
                .collect();
            (q.trim_start_matches(QUERY_PREFIX).to_string(), list)
        })
        .collect();
    Ok((pool, f1))
}

/// Sampled training examples for one batch of `set`.
pub fn assemble_batch<'a>(
    set: &TrainingSet,
    indices: &[usize],
    catalog: &'a Catalog,
    pool: Option<&HardNegativePool>,
) -> Result<Vec<TrainExample<'a>>> {
    indices
        .iter()
        .map(|&i| {
            let p = &set.pairs[i];
            let mut ex = TrainExample::new(lookup(catalog, &p.query)?, lookup(catalog, &p.target)?);
            if let Some(pool) = pool {
                for t in pool.targets(&p.query) {
                    if t != p.target {
                        ex.hard_negatives.push(lookup(catalog, t)?);
                    }
                }
            }
            if let Some(graded) = set.graded.get(&p.query) {
                for (t, score) in graded {
                    ex.graded.push((lookup(catalog, t)?, *score));
                }
            }
            Ok(ex)
        })
        .collect()
}

/// Runs every stage in order. Each iteration draws one dataset by the
/// stage weights and takes the whole batch from it. `on_stage` sees each
/// finished stage with the encoder as it stands.
pub fn run_plan(
    plan: &StagePlan,
    sets: &[TrainingSet],
    catalog: &Catalog,
    enc: &mut ToyEncoder,
    seed: u64,
    mut on_stage: impl FnMut(&StageReport, &ToyEncoder) -> Result<()>,
) -> Result<Vec<StageReport>> {
    plan.validate(sets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (stage_idx, stage) in plan.stages.iter().enumerate() {
        let members: Vec<&TrainingSet> = stage
            .datasets
            .iter()
            .map(|d| sets.iter().find(|s| &s.spec.name == d).expect("validated"))
            .collect();
        for set in &members {
            enc.loss.ensure(&set.spec.name, initial_tau(set.spec.meta_task));
        }

        let mut pools: Vec<Option<HardNegativePool>> = vec![None; members.len()];
        let mut mining = Vec::new();
        if let Some(h) = &stage.hard_negatives {
            for (i, set) in members.iter().enumerate() {
                if stage.weights[i] == 0.0 {
                    continue;
                }
                let (pool, f1) = mine_training_set(enc, set, catalog, h, seed ^ stage_idx as u64)?;
                let sizes: Vec<usize> = pool.per_query.values().map(Vec::len).collect();
                let mean_pool_size = sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64;
                mining.push(MiningSummary {
                    dataset: set.spec.name.clone(),
                    lambda_star: pool.lambda_star,
                    f1,
                    mean_pool_size,
                });
                pools[i] = Some(pool);
            }
        }

        let mut opt = OptimizerState::new(plan.stage_optimizer(stage))?;
        let mut losses = Vec::with_capacity(stage.steps);
        let mut draws: BTreeMap<String, usize> = members.iter().map(|s| (s.spec.name.clone(), 0)).collect();
        for _ in 0..stage.steps {
            let d = draw_dataset(&stage.weights, &mut rng)?;
            let set = members[d];
            *draws.get_mut(&set.spec.name).expect("registered") += 1;
            let n = set.pairs.len();
            let indices = rand::seq::index::sample(&mut rng, n, stage.batch_size.min(n)).into_vec();
            let batch = assemble_batch(set, &indices, catalog, pools[d].as_ref())?;
            let ctx = BatchContext {
                spec: &set.spec,
                settings: &stage.loss,
            };
            let m = train_step(enc, &mut opt, &batch, &ctx)?;
            losses.push(m.loss);
        }
        let report = StageReport {
            name: stage.name.clone(),
            steps: stage.steps,
            losses,
            draws,
            mining,
            final_lr: opt.lr(),
        };
        on_stage(&report, enc)?;
        reports.push(report);
    }
    Ok(reports)
}
