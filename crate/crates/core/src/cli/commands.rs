use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{emit_report, load_config, CliError};
use super::{BalanceArgs, Cli, Command, DistillArgs, EvalArgs, GenSynthArgs, MineArgs, ScheduleArgs, TrainArgs};
use crate::balancing::{balance, BalanceConfig, BalanceReport};
use crate::datasets::{GoldPair, GradedLabel};
use crate::embedding::EmbeddingStore;
use crate::error::Error;
use crate::evalsuite::{evaluate, parse_metrics, EvalConfig, Metric, MetricReport, Separability};
use crate::io::{read_json, read_jsonl, read_store, write_json, write_store};
use crate::losses::{loss_gradient_suite, GradCheckEntry};
use crate::mining::{mine, CurvePoint, PoolConfig};
use crate::recipe::{self, PlanSettings};
use crate::synth::{gen_synthetic, SynthData, SynthSpec};
use crate::trainer::{
    catalog, composition_gradient_check, distill_gradient_checks, draw_dataset, load_checkpoint, run_id2item, run_plan,
    run_seq2item, save_checkpoint, validate_weights, Catalog, DistillConfig, DistillMode, EncoderConfig, IdProjection,
    OptimizerConfig, StagePlan, StageReport, ToyEncoder,
};

/// Name of the training config `gen-synth` writes next to the corpus.
pub const TRAIN_CONFIG_FILE: &str = "train.json";

pub(super) fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a, seed),
        Command::Mine(a) => mine_cmd(a, seed),
        Command::Balance(a) => balance_cmd(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::Schedule(a) => schedule(a, seed),
        Command::Distill(a) => distill(a, seed),
        Command::CheckGrads(a) => check_grads(a.instances, a.out.as_deref(), "check-grads", seed),
    }
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

// ---- gen-synth ----

#[derive(Serialize)]
struct SynthSummary {
    items: usize,
    train_pairs: usize,
    test_pairs: usize,
    graded_labels: usize,
    twins: Vec<(usize, usize)>,
    sequences_train: usize,
    sequences_test: usize,
    id_systems: usize,
    previous_model_stores: Vec<String>,
}

fn gen_synth(args: &GenSynthArgs, seed: u64) -> Result<(), CliError> {
    let mut spec: SynthSpec = match &args.config {
        Some(path) => load_config(path)?,
        None => SynthSpec::default(),
    };
    if let Some(v) = args.n_clusters {
        spec.n_clusters = v;
    }
    if let Some(v) = args.items_per_cluster {
        spec.items_per_cluster = v;
    }
    if let Some(v) = args.noise_sigma {
        spec.noise_sigma = v;
    }
    if let Some(v) = args.hard_fraction {
        spec.hard_fraction = v;
    }
    let data = gen_synthetic(&spec, seed)?;
    data.write(&args.out)?;

    let prev_dir = args.out.join("prev");
    std::fs::create_dir_all(&prev_dir).map_err(|e| Error::io(&prev_dir, e))?;
    let mut prev = Vec::new();
    for (name, store) in recipe::previous_model_stores(&data)? {
        let file = format!("prev/{name}.bin");
        write_store(args.out.join(&file), &store)?;
        prev.push(file);
    }
    write_json(args.out.join(TRAIN_CONFIG_FILE), &PipelineConfig::for_data("."))?;

    let summary = SynthSummary {
        items: data.items.len(),
        train_pairs: data.pairs_in("train").len(),
        test_pairs: data.pairs_in("test").len(),
        graded_labels: data.orders.len(),
        twins: data.twins.clone(),
        sequences_train: data.sequences_train.len(),
        sequences_test: data.sequences_test.len(),
        id_systems: data.id_embeddings.len(),
        previous_model_stores: prev,
    };
    emit_report(Some(&args.out.join("report.json")), "gen-synth", seed, &spec, &summary)
}

// ---- mine ----

#[derive(Serialize)]
struct MineConfig {
    embeddings: String,
    pairs: String,
    split: Option<String>,
    m: usize,
    cap: usize,
}

#[derive(Serialize)]
struct MineResult {
    lambda_star: f64,
    f1: f64,
    curve: Vec<CurvePoint>,
    hard_negatives: BTreeMap<String, Vec<String>>,
    positives: usize,
    negatives_scored: usize,
    negatives_total: usize,
    zero_norm: usize,
}

fn mine_cmd(args: &MineArgs, seed: u64) -> Result<(), CliError> {
    let store = read_store(&args.embeddings)?;
    let mut pairs: Vec<GoldPair> = read_jsonl(&args.pairs)?;
    if let Some(split) = &args.split {
        pairs.retain(|p| p.split.as_deref() == Some(split.as_str()));
    }
    let outcome = mine(&pairs, &store, args.m, PoolConfig { cap: args.cap, seed })?;
    let hard_negatives = outcome
        .pool
        .per_query
        .iter()
        .map(|(q, ts)| (q.clone(), ts.iter().map(|t| t.target.clone()).collect()))
        .collect();
    let config = MineConfig {
        embeddings: display(&args.embeddings),
        pairs: display(&args.pairs),
        split: args.split.clone(),
        m: args.m,
        cap: args.cap,
    };
    let result = MineResult {
        lambda_star: outcome.sweep.lambda_star,
        f1: outcome.sweep.f1_at_star,
        curve: outcome.sweep.curve,
        hard_negatives,
        positives: outcome.positives,
        negatives_scored: outcome.negatives_scored,
        negatives_total: outcome.negatives_total,
        zero_norm: outcome.zero_norm,
    };
    emit_report(args.out.as_deref(), "mine", seed, &config, &result)
}

// ---- balance ----

#[derive(Serialize)]
struct BalanceCliConfig {
    train: Vec<(String, String)>,
    bench: Vec<(String, String)>,
    balance: BalanceConfig,
}

/// `name=file`, or a bare file named after its stem.
fn named_store(spec: &str) -> Result<(String, PathBuf), CliError> {
    match spec.split_once('=') {
        Some((name, file)) if !name.is_empty() => Ok((name.to_string(), PathBuf::from(file))),
        _ => {
            let path = PathBuf::from(spec);
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| CliError::usage(format!("cannot name embedding set `{spec}`")))?;
            Ok((name, path))
        }
    }
}

fn load_named(specs: &[String]) -> Result<(Vec<(String, String)>, Vec<(String, EmbeddingStore)>), CliError> {
    let mut echo = Vec::new();
    let mut stores = Vec::new();
    for s in specs {
        let (name, path) = named_store(s)?;
        stores.push((name.clone(), read_store(&path)?));
        echo.push((name, display(&path)));
    }
    Ok((echo, stores))
}

fn balance_cmd(args: &BalanceArgs, seed: u64) -> Result<(), CliError> {
    let mut cfg = BalanceConfig { seed, ..BalanceConfig::default() };
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = args.temp {
        cfg.temperature = v;
    }
    if let Some(v) = args.iters {
        cfg.sinkhorn_iters = v;
    }
    if let Some(v) = args.sample {
        cfg.sample = v;
    }
    let (train_echo, train) = load_named(&args.train)?;
    let (bench_echo, bench) = load_named(&args.bench)?;
    let report = balance(&train, &bench, &cfg)?;
    let config = BalanceCliConfig {
        train: train_echo,
        bench: bench_echo,
        balance: cfg,
    };
    emit_report(args.out.as_deref(), "balance", seed, &config, &report)
}

// ---- train ----

/// Configuration of `train`. Relative paths resolve against the directory
/// of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Synthetic corpus directory written by `gen-synth`.
    pub data: PathBuf,
    /// Encoder shape; derived from the corpus when omitted.
    #[serde(default)]
    pub encoder: Option<EncoderConfig>,
    /// Explicit stage plan. When omitted, the two-stage recipe built from
    /// `recipe` is used.
    #[serde(default)]
    pub plan: Option<StagePlan>,
    #[serde(default)]
    pub recipe: PlanSettings,
    /// Balancing report whose weights fill every stage left without
    /// weights, matched by dataset name. With the recipe plan they replace
    /// `recipe.diverse_weights`.
    #[serde(default)]
    pub balance_report: Option<PathBuf>,
    #[serde(default = "default_eval_ks")]
    pub eval_ks: Vec<usize>,
}

fn default_eval_ks() -> Vec<usize> {
    vec![1, 5, 10]
}

impl PipelineConfig {
    pub fn for_data(data: impl Into<PathBuf>) -> Self {
        Self {
            data: data.into(),
            encoder: None,
            plan: None,
            recipe: PlanSettings::default(),
            balance_report: None,
            eval_ks: default_eval_ks(),
        }
    }
}

/// The fully resolved run, echoed into the report.
#[derive(Serialize)]
struct ResolvedTrain {
    data: String,
    encoder: EncoderConfig,
    plan: StagePlan,
    balance_report: Option<String>,
    eval_ks: Vec<usize>,
}

#[derive(Serialize)]
struct HeldOutMetrics {
    recall: BTreeMap<String, f64>,
    separability: Option<Separability>,
    hard_cluster: Option<Separability>,
}

#[derive(Serialize)]
struct TrainResult {
    stages: Vec<StageReport>,
    checkpoints: Vec<String>,
    held_out_before: HeldOutMetrics,
    held_out_after: HeldOutMetrics,
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Sets the weights of every stage that has none from `report`,
/// renormalised over the stage's datasets.
fn fill_weights(plan: &mut StagePlan, report: &BalanceReport) -> Result<(), CliError> {
    for stage in plan.stages.iter_mut().filter(|s| s.weights.is_empty()) {
        let raw = stage
            .datasets
            .iter()
            .map(|d| {
                report
                    .weight_of(d)
                    .ok_or_else(|| CliError::from(Error::invalid(format!("balancing report has no weight for `{d}`"))))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid(format!("stage `{}` gets zero total weight from the balancing report", stage.name)).into());
        }
        stage.weights = raw.iter().map(|w| w / total).collect();
    }
    Ok(())
}

fn held_out_metrics(enc: &ToyEncoder, data: &SynthData, catalog: &Catalog, ks: &[usize]) -> Result<HeldOutMetrics, CliError> {
    let held = recipe::held_out(enc, data, catalog)?;
    let cfg = EvalConfig {
        ks: ks.to_vec(),
        metrics: [Metric::Recall, Metric::Separability].into_iter().collect(),
        ..EvalConfig::default()
    };
    let report = evaluate(&held.queries, &held.targets, &held.pairs, None, &cfg)?;
    let hard_cluster = if data.twins.is_empty() {
        None
    } else {
        Some(recipe::hard_cluster_separability(&held, data)?)
    };
    Ok(HeldOutMetrics {
        recall: report.recall,
        separability: report.separability,
        hard_cluster,
    })
}

fn train(args: &TrainArgs, seed: u64) -> Result<(), CliError> {
    let config: PipelineConfig = load_config(&args.config)?;
    let base = args.config.parent().unwrap_or(Path::new("")).to_path_buf();
    let data = SynthData::load(&resolve(&base, &config.data))?;
    let catalog = catalog(data.items.iter().cloned())?;
    let sets = recipe::training_sets(&data)?;
    let encoder = config.encoder.clone().unwrap_or_else(|| recipe::encoder_config(&data));
    let mut plan = match &config.plan {
        Some(plan) => plan.clone(),
        None => {
            let mut plan = recipe::stage_plan(&config.recipe);
            if config.balance_report.is_some() {
                plan.stages[0].weights.clear();
            }
            plan
        }
    };
    if let Some(path) = &config.balance_report {
        #[derive(Deserialize)]
        struct Envelope {
            result: BalanceReport,
        }
        let report = read_json::<Envelope>(resolve(&base, path))?.result;
        fill_weights(&mut plan, &report)?;
    }

    let mut enc = ToyEncoder::new(encoder.clone(), seed)?;
    let before = held_out_metrics(&enc, &data, &catalog, &config.eval_ks)?;
    let mut checkpoints = Vec::new();
    let stages = run_plan(&plan, &sets, &catalog, &mut enc, seed, |stage, enc| {
        let rel = format!("stages/{}-{}", checkpoints.len(), stage.name);
        save_checkpoint(enc, args.out.join(&rel), Some(&stage.name))?;
        checkpoints.push(rel);
        Ok(())
    })?;
    save_checkpoint(&enc, &args.out, plan.stages.last().map(|s| s.name.as_str()))?;
    let after = held_out_metrics(&enc, &data, &catalog, &config.eval_ks)?;

    let resolved = ResolvedTrain {
        data: display(&config.data),
        encoder,
        plan,
        balance_report: config.balance_report.as_deref().map(display),
        eval_ks: config.eval_ks.clone(),
    };
    let result = TrainResult {
        stages,
        checkpoints,
        held_out_before: before,
        held_out_after: after,
    };
    emit_report(Some(&args.out.join("report.json")), "train", seed, &resolved, &result)
}

// ---- eval ----

#[derive(Serialize)]
struct EvalEcho {
    queries: Option<String>,
    targets: Option<String>,
    gold: Option<String>,
    graded: Option<String>,
    checkpoint: Option<String>,
    data: Option<String>,
    dataset: Option<String>,
    split: Option<String>,
    eval: EvalConfig,
}

fn eval(args: &EvalArgs, seed: u64) -> Result<(), CliError> {
    if args.check_grads {
        return check_grads(args.instances, args.out.as_deref(), "eval", seed);
    }
    let cfg = EvalConfig {
        ks: args.ks.clone(),
        metrics: parse_metrics(&args.metrics)?,
        nmi_clusters: args.nmi_clusters,
        seed,
        ..EvalConfig::default()
    };
    let opt = |p: &Option<PathBuf>| p.as_deref().map(display);
    let (report, echo): (MetricReport, EvalEcho) = match (&args.checkpoint, &args.queries) {
        (Some(ckpt), _) => {
            let data_dir = args
                .data
                .as_ref()
                .ok_or_else(|| CliError::usage("--checkpoint needs --data"))?;
            let data = SynthData::load(data_dir)?;
            let catalog = catalog(data.items.iter().cloned())?;
            let enc = load_checkpoint(ckpt)?;
            let held = recipe::encode_split(&enc, &data, &catalog, &args.dataset, &args.split)?;
            let orders: Vec<GradedLabel> = data
                .orders
                .iter()
                .filter(|o| held.queries.position(&o.query).is_some() && held.targets.position(&o.target).is_some())
                .cloned()
                .collect();
            let orders = (args.dataset == recipe::Q2I).then_some(orders.as_slice());
            let report = evaluate(&held.queries, &held.targets, &held.pairs, orders, &cfg)?;
            let echo = EvalEcho {
                queries: None,
                targets: None,
                gold: None,
                graded: None,
                checkpoint: Some(display(ckpt)),
                data: Some(display(data_dir)),
                dataset: Some(args.dataset.clone()),
                split: Some(args.split.clone()),
                eval: cfg,
            };
            (report, echo)
        }
        (None, Some(queries)) => {
            let (Some(targets), Some(gold)) = (&args.targets, &args.gold) else {
                return Err(CliError::usage("--queries needs --targets and --gold"));
            };
            let q = read_store(queries)?;
            let t = read_store(targets)?;
            let pairs: Vec<GoldPair> = read_jsonl(gold)?;
            let graded: Option<Vec<GradedLabel>> = args.graded.as_ref().map(read_jsonl).transpose()?;
            let report = evaluate(&q, &t, &pairs, graded.as_deref(), &cfg)?;
            let echo = EvalEcho {
                queries: Some(display(queries)),
                targets: Some(display(targets)),
                gold: Some(display(gold)),
                graded: opt(&args.graded),
                checkpoint: None,
                data: None,
                dataset: None,
                split: None,
                eval: cfg,
            };
            (report, echo)
        }
        (None, None) => {
            return Err(CliError::usage(
                "eval needs --queries/--targets/--gold, --checkpoint with --data, or --check-grads",
            ))
        }
    };
    emit_report(args.out.as_deref(), "eval", seed, &echo, &report)
}

// ---- schedule ----

#[derive(Serialize)]
struct ScheduleConfig {
    weights: Vec<f64>,
    draws: usize,
}

#[derive(Serialize)]
struct ScheduleResult {
    counts: Vec<usize>,
    frequencies: Vec<f64>,
    /// Half-width `3 sqrt(w (1 - w) / draws)` of the band around each
    /// weight.
    band: Vec<f64>,
    within_band: Vec<bool>,
    indices: Vec<usize>,
}

fn schedule(args: &ScheduleArgs, seed: u64) -> Result<(), CliError> {
    validate_weights(&args.weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = (0..args.draws)
        .map(|_| draw_dataset(&args.weights, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let mut counts = vec![0; args.weights.len()];
    for &i in &indices {
        counts[i] += 1;
    }
    let n = args.draws.max(1) as f64;
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let band: Vec<f64> = args.weights.iter().map(|w| 3.0 * (w * (1.0 - w) / n).sqrt()).collect();
    let within_band = frequencies
        .iter()
        .zip(&args.weights)
        .zip(&band)
        .map(|((f, w), b)| (f - w).abs() <= *b + 1e-12)
        .collect();
    let config = ScheduleConfig {
        weights: args.weights.clone(),
        draws: args.draws,
    };
    let result = ScheduleResult {
        counts,
        frequencies,
        band,
        within_band,
        indices,
    };
    emit_report(args.out.as_deref(), "schedule", seed, &config, &result)
}

// ---- distill ----

#[derive(Serialize)]
struct DistillEcho {
    data: String,
    checkpoint: Option<String>,
    distill: DistillConfig,
    optimizer: OptimizerConfig,
    steps: usize,
    batch_size: usize,
}

#[derive(Serialize)]
struct DistillResult {
    mode: DistillMode,
    /// Held-out score before and after: sequence Recall@1 for seq2item,
    /// mean ID alignment loss for id2item.
    held_out_before: f64,
    held_out_after: f64,
    /// Held-out item-to-item Recall@1, tracked for id2item only.
    #[serde(skip_serializing_if = "Option::is_none")]
    i2i_recall_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    i2i_recall_after: Option<f64>,
    losses: Vec<f64>,
    saved: Option<String>,
}

fn distill(args: &DistillArgs, seed: u64) -> Result<(), CliError> {
    let data = SynthData::load(&args.data)?;
    let catalog = catalog(data.items.iter().cloned())?;
    let mut enc = match &args.checkpoint {
        Some(dir) => load_checkpoint(dir)?,
        None => ToyEncoder::new(recipe::encoder_config(&data), seed)?,
    };
    let cfg = DistillConfig {
        mode: args.mode.into(),
        seq_len: args.seq_len,
        id_dim: data.spec.id_dim,
        aux_weight: args.aux_weight,
        ..DistillConfig::default()
    };
    cfg.validate()?;
    let optimizer = OptimizerConfig {
        lr_max: args.lr,
        lr_min: args.lr / 10.0,
        warmup_steps: args.steps.min(20),
        total_steps: args.steps,
        min_tau: 0.05,
        ..OptimizerConfig::default()
    };
    let mut result = DistillResult {
        mode: cfg.mode,
        held_out_before: 0.0,
        held_out_after: 0.0,
        i2i_recall_before: None,
        i2i_recall_after: None,
        losses: Vec::new(),
        saved: None,
    };
    match cfg.mode {
        DistillMode::Seq2item => {
            result.held_out_before = recipe::sequence_recall_at_1(&enc, &data.sequences_test, &catalog, &cfg)?;
            let metrics = run_seq2item(
                &mut enc,
                &data.sequences_train,
                &catalog,
                &cfg,
                &optimizer,
                args.steps,
                args.batch_size,
                seed,
            )?;
            result.losses = metrics.iter().map(|m| m.loss).collect();
            result.held_out_after = recipe::sequence_recall_at_1(&enc, &data.sequences_test, &catalog, &cfg)?;
        }
        DistillMode::Id2item => {
            let mut projection = IdProjection::new(cfg.id_dim, enc.dim(), seed);
            let train = recipe::id_examples(&data, &catalog, "train")?;
            let test = recipe::id_examples(&data, &catalog, "test")?;
            let sets = recipe::training_sets(&data)?;
            let aux = sets.iter().find(|s| s.spec.name == recipe::I2I).expect("recipe has i2i");
            result.held_out_before = recipe::mean_alignment(&enc, &projection, &test, &cfg)?;
            result.i2i_recall_before = Some(recipe::i2i_recall_at_1(&enc, &data, &catalog)?);
            let metrics = run_id2item(
                &mut enc,
                &mut projection,
                &train,
                (cfg.aux_weight > 0.0).then_some((aux, &catalog)),
                &cfg,
                &optimizer,
                args.steps,
                args.batch_size,
                seed,
            )?;
            result.losses = metrics.iter().map(|m| m.loss).collect();
            result.held_out_after = recipe::mean_alignment(&enc, &projection, &test, &cfg)?;
            result.i2i_recall_after = Some(recipe::i2i_recall_at_1(&enc, &data, &catalog)?);
        }
    }
    if let Some(dir) = &args.save {
        save_checkpoint(&enc, dir, Some("distill"))?;
        result.saved = Some(display(dir));
    }
    let echo = DistillEcho {
        data: display(&args.data),
        checkpoint: args.checkpoint.as_deref().map(display),
        distill: cfg,
        optimizer,
        steps: args.steps,
        batch_size: args.batch_size,
    };
    emit_report(args.out.as_deref(), "distill", seed, &echo, &result)
}

// ---- check-grads ----

#[derive(Serialize)]
struct CheckGradsConfig {
    instances: usize,
}

#[derive(Serialize)]
struct CheckGradsResult {
    entries: Vec<GradCheckEntry>,
    passed: bool,
}

fn check_grads(instances: usize, out: Option<&Path>, command: &str, seed: u64) -> Result<(), CliError> {
    if instances == 0 {
        return Err(CliError::usage("--instances must be at least 1"));
    }
    let mut entries = loss_gradient_suite(instances, seed)?;
    entries.push(composition_gradient_check(instances, seed)?);
    entries.extend(distill_gradient_checks(instances, seed)?);
    let passed = entries.iter().all(|e| e.passed);
    let failed: Vec<String> = entries.iter().filter(|e| !e.passed).map(|e| e.name.clone()).collect();
    emit_report(out, command, seed, &CheckGradsConfig { instances }, &CheckGradsResult { entries, passed })?;
    if passed {
        Ok(())
    } else {
        Err(CliError::runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::StageSpec;

    fn stage(datasets: &[&str]) -> StageSpec {
        let mut plan = recipe::stage_plan(&PlanSettings::default());
        let mut s = plan.stages.remove(0);
        s.datasets = datasets.iter().map(|d| d.to_string()).collect();
        s.weights.clear();
        s
    }

    #[test]
    fn balance_weights_fill_empty_stages() {
        let report = BalanceReport {
            train: vec!["a".into(), "b".into(), "c".into()],
            benchmarks: vec!["x".into()],
            sim_matrix: vec![vec![0.0]; 3],
            weights: vec![0.5, 0.3, 0.2],
            temperature: 1.0,
            unconverged_cells: 0,
        };
        let mut fixed = stage(&["a"]);
        fixed.weights = vec![1.0];
        let mut plan = StagePlan {
            stages: vec![stage(&["b", "c"]), fixed],
            optimizer: OptimizerConfig::default(),
        };
        fill_weights(&mut plan, &report).unwrap();
        assert!((plan.stages[0].weights[0] - 0.6).abs() < 1e-12);
        assert!((plan.stages[0].weights[1] - 0.4).abs() < 1e-12);
        assert_eq!(plan.stages[1].weights, vec![1.0]);

        let mut missing = StagePlan {
            stages: vec![stage(&["zzz"])],
            optimizer: OptimizerConfig::default(),
        };
        assert_eq!(fill_weights(&mut missing, &report).unwrap_err().code, 2);
    }

    #[test]
    fn named_store_syntax() {
        assert_eq!(named_store("q2i=prev/a.bin").unwrap(), ("q2i".into(), PathBuf::from("prev/a.bin")));
        assert_eq!(named_store("dir/bench.bin").unwrap(), ("bench".into(), PathBuf::from("dir/bench.bin")));
    }

    #[test]
    fn pipeline_config_round_trips_with_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"data": "corpus"}"#).unwrap();
        assert_eq!(cfg, PipelineConfig::for_data("corpus"));
    }
}
