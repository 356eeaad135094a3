use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn ir2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ir2")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ir2(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = json!({
        "name": "cli",
        "data": { "toy": { "documents": 40, "queries": 20 } },
        "methods": ["pretrained", "promptagator"],
        "baseline": "pretrained",
        "encoder": { "hash_dim": 4096, "output_dim": 16 },
        "train": { "batch_size": 8, "accumulation_steps": 1, "learning_rate": 0.01 },
        "top_k": 20,
        "seeds": [0, 1],
        "output_dir": dir.join("run").to_str().unwrap()
    });
    let p = dir.join("cfg.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn run_verify_and_rerun_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let first = ok(&["run", "--config", cfg]);
    assert!(first.contains("| promptagator |"), "{first}");
    let run = dir.path().join("run");
    for f in ["manifest.json", "metrics.csv", "report.md", "report.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(ok(&["verify", run.to_str().unwrap()]).contains("verified"));
    let again = ok(&["run", "--config", cfg]);
    assert!(again.contains(", 0 executed"), "{again}");
}

#[test]
fn overrides_redirect_output_and_change_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    ok(&["generate", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "9", "--sequential"]);
    let data = |d: &Path| fs::read(d.join("datasets/promptagator.jsonl")).unwrap();
    assert!(!dir.path().join("run").exists());
    assert!(!a.join("checkpoints").exists());
    assert_ne!(data(&a), data(&b));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["seed"], 9);
    assert_eq!(m["config"]["execution"], "sequential");
    assert_eq!(m["complete"], false);
}

#[test]
fn artifact_commands_reproduce_pipeline_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(&["run", "--config", cfg.to_str().unwrap()]);
    let run = dir.path().join("run");
    let p = |rel: &str| run.join(rel).to_str().unwrap().to_string();
    let t = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let ckpt = p("checkpoints/promptagator/seed_1.bin");
    ok(&["embed", "--checkpoint", &ckpt, "--input", &p("data/corpus.jsonl"), "--out", &t("d.bin")]);
    ok(&["embed", "--checkpoint", &ckpt, "--input", &p("data/queries.jsonl"), "--out", &t("q.jsonl")]);
    ok(&["rank", "--queries", &t("q.jsonl"), "--docs", &t("d.bin"), "--top-k", "20", "--out", &t("r.jsonl")]);
    let csv = ok(&["evaluate", "--run", &t("r.jsonl"), "--qrels", &p("data/qrels.jsonl"), "--method", "promptagator", "--seed", "1"]);
    let row = csv.lines().nth(1).unwrap();
    let pipeline = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(pipeline.lines().any(|l| l == row), "{row} not in\n{pipeline}");

    let cmp = ok(&["compare", "--trials", &p("metrics"), "--baseline", "pretrained", "--m", "8", "--format", "csv"]);
    assert_eq!(cmp, fs::read_to_string(run.join("report.csv")).unwrap());
}

#[test]
fn invalid_config_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"data": {"toy": {}}, "methods": ["pretrained"], "output_dir": "x", "lerning_rate": 1}"#).unwrap();
    let out = ir2(&["validate", "--config", p.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lerning_rate"));
    let out = ir2(&["run", "--config", p.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!dir.path().join("x").exists());
}

#[test]
fn cost_estimate_from_records() {
    let dir = tempfile::tempdir().unwrap();
    let rec = |model: &str, p: u64, c: u64| {
        json!({
            "request_id": "r", "template_id": "t", "model": model, "prompt": "", "response": "",
            "backend": "remote", "timestamp": 0, "prompt_tokens": p, "completion_tokens": c
        })
        .to_string()
    };
    let records = dir.path().join("records.jsonl");
    fs::write(&records, [rec("a", 1000, 500), rec("a", 1000, 500), rec("b", 2000, 0)].join("\n") + "\n").unwrap();
    let prices = dir.path().join("prices.json");
    fs::write(&prices, r#"{"a": {"prompt_per_1k": 0.03, "completion_per_1k": 0.06}, "b": {"prompt_per_1k": 0.001, "completion_per_1k": 0.002}}"#)
        .unwrap();
    let out = ok(&["cost-estimate", "--records", records.to_str().unwrap(), "--prices", prices.to_str().unwrap()]);
    // a: 2 * (0.03 + 0.03) = 0.12; b: 2 * 0.001 = 0.002
    assert!(out.contains("a,2,2000,1000,0.1200"), "{out}");
    assert!(out.contains("total,,,,0.1220"), "{out}");

    fs::write(&prices, r#"{"a": {"prompt_per_1k": 0.03, "completion_per_1k": 0.06}}"#).unwrap();
    let out = ir2(&["cost-estimate", "--records", records.to_str().unwrap(), "--prices", prices.to_str().unwrap()]);
    assert!(!out.status.success());
}
