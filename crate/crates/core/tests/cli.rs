use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_omni-embed"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).env_remove("OMNI_EMBED_SEED").output().unwrap()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let value: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&value).unwrap()
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(validator: &jsonschema::Validator, doc: &Value) {
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr_error(out: &Output) -> Value {
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_valid(&schema("error.schema.json"), &v);
    v["error"].clone()
}

#[test]
fn schedule_with_one_hot_weights_always_draws_first() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["schedule", "--weights", "1,0", "--draws", "100"]);
    ok(&out);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_valid(&schema("report.schema.json"), &report);
    let indices = report["result"]["indices"].as_array().unwrap();
    assert_eq!(indices.len(), 100);
    assert!(indices.iter().all(|i| i == 0));
}

#[test]
fn missing_input_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["mine", "--embeddings", "absent.bin", "--pairs", "pairs.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_error(&out);
    assert_eq!(err["kind"], "io");
    assert_eq!(err["path"], "absent.bin");
}

#[test]
fn invalid_config_reports_field_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"data": ".", "recipe": {"hard_steps": -3}}"#).unwrap();
    let out = run_in(dir.path(), &["train", "--config", "c.json", "--out", "ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_error(&out);
    assert_eq!(err["kind"], "config");
    assert_eq!(err["field"], "recipe.hard_steps");
}

#[test]
fn usage_errors_are_json_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["schedule", "--draws", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["kind"], "usage");
}

#[test]
fn version_prints_semver_and_build() {
    let out = bin().arg("--version").output().unwrap();
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with(&format!("omni-embed {} (", env!("CARGO_PKG_VERSION"))), "{text}");
}

#[test]
fn seed_comes_from_env_unless_flag_given() {
    let dir = tempfile::tempdir().unwrap();
    let seed_of = |out: Output| -> Value {
        ok(&out);
        serde_json::from_slice::<Value>(&out.stdout).unwrap()["seed"].clone()
    };
    let env_only = bin()
        .current_dir(dir.path())
        .args(["schedule", "--weights", "0.5,0.5", "--draws", "4"])
        .env("OMNI_EMBED_SEED", "17")
        .output()
        .unwrap();
    assert_eq!(seed_of(env_only), 17);
    let both = bin()
        .current_dir(dir.path())
        .args(["schedule", "--weights", "0.5,0.5", "--draws", "4", "--seed", "3"])
        .env("OMNI_EMBED_SEED", "17")
        .output()
        .unwrap();
    assert_eq!(seed_of(both), 3);
}

#[test]
fn check_grads_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["check-grads", "--out", "grads.json"]);
    ok(&out);
    let report = read(&dir.path().join("grads.json"));
    assert_valid(&schema("report.schema.json"), &report);
    let entries = report["result"]["entries"].as_array().unwrap();
    assert!(entries.len() >= 10);
    for e in entries {
        assert_eq!(e["instances"], 50, "{e}");
        assert!(e["max_rel_error"].as_f64().unwrap() < 1e-4, "{e}");
    }
}

/// Every subcommand on a tiny corpus, each report checked against the
/// published schema.
#[test]
fn pipeline_reports_match_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let report_schema = schema("report.schema.json");
    let steps = |args: &[&str]| ok(&run_in(d, args));

    steps(&["gen-synth", "--out", "data", "--n-clusters", "4", "--items-per-cluster", "40"]);
    let item_schema = schema("item.schema.json");
    for line in std::fs::read_to_string(d.join("data/items.jsonl")).unwrap().lines().take(20) {
        assert_valid(&item_schema, &serde_json::from_str(line).unwrap());
    }
    steps(&[
        "mine", "--embeddings", "data/latents.bin", "--pairs", "data/pairs.jsonl", "--split", "train", "--m", "3", "--out",
        "mine.json",
    ]);
    steps(&[
        "balance", "--train", "q2i=data/prev/q2i.bin", "i2i=data/prev/i2i.bin", "ttc=data/prev/ttc.bin", "--bench",
        "data/bench.bin", "--k", "8", "--out", "balance.json",
    ]);
    std::fs::write(
        d.join("train.json"),
        r#"{"data": "data", "balance_report": "balance.json",
            "recipe": {"diverse_steps": 20, "hard_steps": 20, "batch_size": 8, "hard_negatives": 2}}"#,
    )
    .unwrap();
    steps(&["train", "--config", "train.json", "--out", "ckpt", "--workers", "1"]);
    steps(&["eval", "--checkpoint", "ckpt", "--data", "data", "--out", "eval-ckpt.json"]);
    steps(&[
        "eval", "--queries", "data/latents.bin", "--targets", "data/latents.bin", "--gold", "data/pairs.jsonl", "--graded",
        "data/orders.jsonl", "--out", "eval-stores.json",
    ]);
    steps(&[
        "distill", "--mode", "seq2item", "--data", "data", "--checkpoint", "ckpt", "--steps", "5", "--out", "seq.json",
    ]);
    steps(&[
        "distill", "--mode", "id2item", "--data", "data", "--steps", "5", "--out", "id.json", "--save", "distilled",
    ]);
    steps(&["eval", "--check-grads", "--instances", "2", "--out", "eval-grads.json"]);

    let trained = read(&d.join("ckpt/report.json"));
    assert_eq!(trained["result"]["checkpoints"], serde_json::json!(["stages/0-diverse", "stages/1-hard"]));
    assert!(d.join("ckpt/stages/1-hard/manifest.json").exists());
    assert!(d.join("distilled/manifest.json").exists());
    let weights = &trained["config"]["plan"]["stages"][0]["weights"];
    let from_balance = &read(&d.join("balance.json"))["result"]["weights"];
    assert_eq!(weights.as_array().unwrap().len(), 3);
    for (w, b) in weights.as_array().unwrap().iter().zip(from_balance.as_array().unwrap()) {
        assert!((w.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-9);
    }

    for name in [
        "data/report.json", "mine.json", "balance.json", "ckpt/report.json", "eval-ckpt.json", "eval-stores.json", "seq.json",
        "id.json", "eval-grads.json",
    ] {
        let report = read(&d.join(name));
        assert_valid(&report_schema, &report);
    }
    let stores = read(&d.join("eval-stores.json"));
    assert!(stores["result"]["kendall_tau"].is_number(), "{}", stores["result"]);
}

#[test]
fn schema_rejects_mismatched_result() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["schedule", "--weights", "1", "--draws", "2"]);
    ok(&out);
    let mut report: Value = serde_json::from_slice(&out.stdout).unwrap();
    report["command"] = "mine".into();
    assert!(!schema("report.schema.json").is_valid(&report));
}
