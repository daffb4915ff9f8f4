use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_coe");

fn coe(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path, layers: usize) -> String {
    let informative: Vec<Vec<usize>> = (0..layers).map(|v| vec![v % 2]).collect();
    let cfg = json!({
        "data": {
            "kind": "synthetic",
            "num_nodes": 60,
            "num_classes": 2,
            "num_layers": layers,
            "informative": informative,
            "p_in": 0.5,
            "p_out": 0.0,
            "feature_noise": 0.1,
            "feature_dim": 4,
            "seed": 1
        },
        "epochs": 30,
        "lr": 0.01,
        "hidden_dim": 16,
        "embed_dim": 8,
        "knn_k": 5,
        "seeds": [0, 1],
        "theta_iterations": 50
    });
    let path = dir.join(format!("config{layers}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_writes_all_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let out = dir.path().join("out");
    let o = coe(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.csv", "report.json", "theory_report.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["kind"], "run");
    let rows = report["rows"].as_array().unwrap();
    assert!(rows.iter().all(|r| r["config_hash"] == report["config_hash"]));
    let coe_rows: Vec<&Value> = rows.iter().filter(|r| r["method"] == "coe").collect();
    assert_eq!(coe_rows.len(), 2);
    assert!(coe_rows.iter().all(|r| r["accuracy"].as_f64().unwrap() == 1.0));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("kind,method,setting,seed,accuracy,config_hash,version"));
}

#[test]
fn identical_invocations_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = coe(&["run", "--config", &cfg, "--no-theory", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
    }
    assert_eq!(
        fs::read(a.join("report.json")).unwrap(),
        fs::read(b.join("report.json")).unwrap()
    );
}

#[test]
fn flags_override_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let out = dir.path().join("out");
    let o = coe(&[
        "run", "--config", &cfg, "--seeds", "3", "--no-he", "--no-theory", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("report.json"));
    let experts: Vec<&str> = report["experts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["expert"].as_str().unwrap())
        .collect();
    assert_eq!(experts, ["layer0", "layer1"]);
    assert!(report["rows"].as_array().unwrap().iter().all(|r| r["seed"] == 3));
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let out = dir.path().join("out");
    let o = coe(&["run", "--config", &cfg, "--lr", "-1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning rate"));

    let single = small_config(dir.path(), 1);
    let o = coe(&["fusion-compare", "--config", &single, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("requires ≥2 layers"));

    let o = coe(&["run", "--config", dir.path().join("absent.json").to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let out = dir.path().join("out");
    let o = coe(&[
        "run", "--config", &cfg, "--lr", "1e9", "--epochs", "5", "--no-theory", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_then_run_on_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let data = dir.path().join("data");
    let o = coe(&["gen-data", "--config", &cfg, "--split-seed", "4", "--out", data.to_str().unwrap()]);
    assert!(o.status.success());
    for f in ["meta.json", "labels.tsv", "split.json", "layer0.edges.tsv", "layer1.features.csv"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let out = dir.path().join("out");
    let o = coe(&[
        "run", "--config", &cfg, "--dataset", data.to_str().unwrap(), "--no-theory", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_theory_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("theory");
    let o = coe(&["verify-theory", "--seeds", "0", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let report = read_json(&out.join("theory_report.json"));
    let names: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    for want in ["lipschitz_single_node", "convergence", "generalization_n100"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS") || l.starts_with("FAIL")));
}

#[test]
fn sweeps_and_ablation_emit_settings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let out = dir.path().join("sens");
    let o = coe(&["sensitivity", "--param", "alpha", "--config", &cfg, "--alpha-grid", "50,100", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("report.json"));
    assert!(report["spread"].is_number());

    let out = dir.path().join("rob");
    let o = coe(&[
        "robustness", "--config", &cfg, "--robustness-ratios", "0,0.5", "--robustness-modes", "delete",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("report.json"));
    let settings: Vec<&str> = report["summaries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["setting"].as_str().unwrap())
        .collect();
    assert!(settings.contains(&"delete=0") && settings.contains(&"delete=0.5"), "{settings:?}");

    let out = dir.path().join("abl");
    let o = coe(&["ablation", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let report = read_json(&out.join("report.json"));
    let methods: Vec<&str> = report["summaries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["method"].as_str().unwrap())
        .collect();
    assert_eq!(methods, ["coe", "rf", "wrf", "no_he", "no_gsl"]);
}
