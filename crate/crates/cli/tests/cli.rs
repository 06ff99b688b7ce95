use std::path::Path;
use std::process::{Command, Output};

fn ctsls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctsls")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const CHAIN: &str = r#"{
    "plant": {"kind": "chain", "n": 11, "a_diag": 0.6, "a_off": 0.4, "b_diag": 1.0},
    "weights": {"q": 1.0, "r": 10.0},
    "objective": "h2",
    "poles": [4, 2],
    "distances": [2],
    "centralized": true,
    "simulate": {"state": 6, "t_end": 30.0, "dt": 0.1},
    "record_timing": false
}"#;

#[test]
fn sweep_writes_sorted_csv_runs_and_simulations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "chain.json", CHAIN);
    let out = dir.path().join("out");
    let res = ctsls(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let mut rdr = csv::Reader::from_path(out.join("results.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..9], ["objective", "K", "d", "norm", "baseline", "normalized_cost", "residual", "gamma", "solve_ms"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let keys: Vec<(&str, &str)> = rows.iter().map(|r| (&r[1], &r[2])).collect();
    assert_eq!(keys, [("2", "2"), ("2", "inf"), ("4", "2"), ("4", "inf")]);
    for r in &rows {
        let nc: f64 = r[5].parse().unwrap();
        let res: f64 = r[6].parse().unwrap();
        assert!(nc >= 1.0 - 1e-6, "normalized cost {nc}");
        assert!(res <= 1e-6);
        assert_eq!(&r[8], "", "timing disabled");
    }
    let k4d2: f64 = rows[2][5].parse().unwrap();
    assert!(k4d2 < 1.10);

    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("runs/h2_K4_d2.json")).unwrap()).unwrap();
    assert_eq!(run["K"], 4);
    assert!(run["PhiX"].is_array() && run["poles"].as_array().unwrap().len() == 4);
    let sim = std::fs::read_to_string(out.join("sims/h2_K4_d2.csv")).unwrap();
    assert!(sim.starts_with("t,x1,"));
    assert_eq!(sim.lines().count(), 1 + 301);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("sims/h2_K4_d2.json")).unwrap()).unwrap();
    assert!(summary["summary"]["containment_max_leak"].as_f64().unwrap() <= 1e-8);
    assert_eq!(summary["stability"]["stable"], true);

    let verify = ctsls(&[
        "verify",
        "--ensemble",
        out.join("runs/h2_K4_d2.json").to_str().unwrap(),
        "--plant",
        out.join("plant.json").to_str().unwrap(),
        "--distance",
        "2",
        "--r",
        "10",
    ]);
    let text = String::from_utf8_lossy(&verify.stdout);
    assert!(verify.status.success(), "{text}");
    assert!(text.contains("verification passed"));
}

#[test]
fn reruns_are_byte_identical_without_timing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "chain.json", &CHAIN.replace("\"simulate\": {\"state\": 6, \"t_end\": 30.0, \"dt\": 0.1},", ""));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(ctsls(&["sweep", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    let single = Command::new(env!("CARGO_BIN_EXE_ctsls"))
        .args(["sweep", "--config", &cfg, "--out", b.to_str().unwrap()])
        .env("CTSLS_WORKERS", "1")
        .output()
        .unwrap();
    assert!(single.status.success());
    assert_eq!(std::fs::read(a.join("results.csv")).unwrap(), std::fs::read(b.join("results.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("runs/h2_K4_d2.json")).unwrap(), std::fs::read(b.join("runs/h2_K4_d2.json")).unwrap());
}

#[test]
fn empty_sweep_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "empty.json", &CHAIN.replace("[4, 2]", "[]"));
    let out = dir.path().join("out");
    let res = ctsls(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success());
    let text = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("objective,K,d,"));
}

#[test]
fn unstabilizable_plant_fails() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "plant.json", r#"{"A": [[1.0]], "B": [[0.0]], "state_subsystems": [0], "input_subsystems": [0]}"#);
    let cfg = write(
        dir.path(),
        "bad.json",
        r#"{"plant": {"kind": "file", "path": "plant.json"}, "weights": {"q": 1, "r": 1},
            "objective": "h2", "poles": [2], "distances": [1]}"#,
    );
    let res = ctsls(&["sweep", "--config", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("stabilizable"));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "odd.json", &CHAIN.replace("[4, 2]", "[3]"));
    let res = ctsls(&["sweep", "--config", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("even"));
}

#[test]
fn verify_reports_dimension_mismatch_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "chain.json", &CHAIN.replace("[4, 2]", "[4]"));
    let out = dir.path().join("out");
    assert!(ctsls(&["synth", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let ens_path = out.join("runs/h2_K4_d2.json");

    write(dir.path(), "small.json", r#"{"A": [[0.0]], "B": [[1.0]], "state_subsystems": [0], "input_subsystems": [0]}"#);
    let res = ctsls(&["verify", "--ensemble", ens_path.to_str().unwrap(), "--plant", dir.path().join("small.json").to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("dimension mismatch"));

    let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ens_path).unwrap()).unwrap();
    let entry = &mut doc["PhiU"][0][0][0][0];
    *entry = serde_json::json!(entry.as_f64().unwrap() + 0.1);
    let bad = write(dir.path(), "bad.json", &doc.to_string());
    let res = ctsls(&["verify", "--ensemble", &bad, "--plant", out.join("plant.json").to_str().unwrap(), "--r", "10"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stdout).contains("FAILED: residual"));
}

#[test]
fn chain_preset_prints_and_runs() {
    let res = ctsls(&["reproduce-chain", "--print-config"]);
    assert!(res.status.success());
    let cfg: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(cfg["poles"], serde_json::json!([4]));
    let dir = tempfile::tempdir().unwrap();
    let res = ctsls(&["reproduce-chain", "--out", dir.path().to_str().unwrap()]);
    assert!(res.status.success());
    assert!(dir.path().join("sims/h2_K4_d2.csv").exists());
}
