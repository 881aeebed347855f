use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

fn lba() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lba"));
    c.env_remove("LBA_SEED");
    c
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = json!({
        "seed": 11,
        "n_images": 30,
        "bootstrap_size": 80,
        "budget": 120,
        "eval_size": 200,
        "eval_images": 20,
        "ood_eval_size": 50,
        "k": 8,
        "max_attempts": 300,
        "generated_per_image": 2,
        "features": {"dim": 4096}
    });
    let p = dir.join("c.json");
    fs::write(&p, cfg.to_string()).unwrap();
    p
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn run_lba_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(lba().args(["run-lba", "--config"]).arg(&cfg).args(["--seed", "7", "--out"]).arg(out));
    }
    for f in ["effective-config.json", "metrics.jsonl", "audit.jsonl", "summary.json", "model.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let eff: Value = serde_json::from_str(&fs::read_to_string(a.join("effective-config.json")).unwrap()).unwrap();
    assert_eq!(eff["seed"], 7);
    assert_eq!(fs::read_to_string(a.join("audit.jsonl")).unwrap().lines().count(), 120);
}

#[test]
fn seed_precedence_flag_env_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let seed_of = |out: &Path| -> Value {
        let text = fs::read_to_string(out.join("effective-config.json")).unwrap();
        serde_json::from_str::<Value>(&text).unwrap()["seed"].clone()
    };
    let o1 = dir.path().join("o1");
    run_ok(lba().args(["gen-scenes", "--config"]).arg(&cfg).arg("--out").arg(&o1));
    assert_eq!(seed_of(&o1), 11);
    let o2 = dir.path().join("o2");
    run_ok(lba().env("LBA_SEED", "21").args(["gen-scenes", "--config"]).arg(&cfg).arg("--out").arg(&o2));
    assert_eq!(seed_of(&o2), 21);
    let o3 = dir.path().join("o3");
    run_ok(
        lba()
            .env("LBA_SEED", "21")
            .args(["gen-scenes", "--seed", "31", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&o3),
    );
    assert_eq!(seed_of(&o3), 31);
    assert_ne!(
        fs::read(o1.join("scenes.json")).unwrap(),
        fs::read(o3.join("scenes.json")).unwrap()
    );
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lba().args(["run-lba", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
    let out = lba().args(["run-lba", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"n_images": 0}"#).unwrap();
    let out = lba().args(["run-lba", "--config"]).arg(&bad).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    // effective config is written before the run starts
    assert!(dir.path().join("o/effective-config.json").exists());
}

#[test]
fn bootstrap_baseline_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let boot = dir.path().join("boot");
    run_ok(lba().args(["bootstrap", "--config"]).arg(&cfg).arg("--out").arg(&boot));
    let lines: Vec<Value> = fs::read_to_string(boot.join("bootstrap.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 80);
    assert!(lines.iter().all(|t| t["response"]["e_valid"] == true));

    let base = dir.path().join("base");
    run_ok(lba().args(["run-baseline", "--budget", "50", "--config"]).arg(&cfg).arg("--out").arg(&base));
    let summary: Value = serde_json::from_str(&fs::read_to_string(base.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["oracle_calls"], 50);
    assert_eq!(summary["invalid_calls"], 0);

    let ev = dir.path().join("ev");
    run_ok(
        lba()
            .args(["evaluate", "--config"])
            .arg(&cfg)
            .arg("--model")
            .arg(base.join("model.bin"))
            .arg("--out")
            .arg(&ev),
    );
    let result: Value = serde_json::from_str(&fs::read_to_string(ev.join("evaluation.json")).unwrap()).unwrap();
    assert_eq!(result["accuracy"], summary["final_accuracy"]);
}

#[test]
fn ablate_writes_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let grid = dir.path().join("g.json");
    fs::write(
        &grid,
        json!({"cells": [
            {"name": "none", "relevance": "none", "budget": 40, "checkpoints": [1.0]},
            {"name": "learned", "relevance": "learned", "budget": 40, "checkpoints": [1.0]},
            {"name": "perfect", "relevance": "perfect", "budget": 40, "checkpoints": [1.0]}
        ]})
        .to_string(),
    )
    .unwrap();
    let out = dir.path().join("abl");
    run_ok(
        lba()
            .args(["ablate", "--repeats", "5", "--jobs", "2", "--grid"])
            .arg(&grid)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out),
    );
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("cell_id,config_hash,budget,mean_acc,std_acc"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), ["none", "learned", "perfect"]);

    // the stddev column matches a recomputation from the per-repeat accuracies
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for (row, json_row) in rows.iter().zip(report["rows"].as_array().unwrap()) {
        let accs: Vec<f64> = json_row["accuracies"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(accs.len(), 5);
        let m = accs.iter().sum::<f64>() / 5.0;
        let sd = (accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((row[3].parse::<f64>().unwrap() - m).abs() < 1e-12);
        assert!((row[4].parse::<f64>().unwrap() - sd).abs() < 1e-12);
    }
}

#[test]
fn report_tables_match_raw_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let runs: Vec<_> = ["curriculum", "random"]
        .iter()
        .map(|p| {
            let out = dir.path().join(p);
            run_ok(lba().args(["run-lba", "--policy", p, "--config"]).arg(&cfg).arg("--out").arg(&out));
            out
        })
        .collect();
    let missing = dir.path().join("empty");
    fs::create_dir_all(&missing).unwrap();
    let figs = dir.path().join("figs");
    let out = lba()
        .args(["report", "--out"])
        .arg(&figs)
        .args(&runs)
        .arg(&missing)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));

    let rows = |name: &str| -> Vec<Vec<String>> {
        fs::read_to_string(figs.join(name))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(String::from).collect())
            .collect()
    };
    // one fig4 row per checkpoint per run
    assert_eq!(rows("fig4.csv").len(), 2 * 5);
    let policies: std::collections::BTreeSet<String> = rows("fig7.csv").into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(policies.len(), 2);

    // re-aggregate informativeness per decile straight from the JSON lines
    let fig8 = rows("fig8.csv");
    for run in &runs {
        let name = run.file_name().unwrap().to_string_lossy().to_string();
        let steps: Vec<Value> = fs::read_to_string(run.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let n = steps.len();
        for ty in ["bool", "count", "color", "shape", "size", "material"] {
            for d in 0..10 {
                let slice = &steps[d * n / 10..(d + 1) * n / 10];
                let want = slice.iter().map(|s| s["h_by_type"][ty].as_f64().unwrap_or(0.0)).sum::<f64>() / slice.len() as f64;
                let row = fig8
                    .iter()
                    .find(|r| r[0] == name && r[1] == d.to_string() && r[2] == ty)
                    .expect("fig8 row");
                let got: f64 = row[3].parse().unwrap();
                assert!((got - want).abs() <= 1e-9, "{name} {ty} {d}: {got} vs {want}");
            }
        }
    }
}
