use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unlearn"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn unlearn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).trim().to_string()
}

// Shrinks the benchmark config so the whole pipeline runs in well under a second.
fn tiny_config(dir: &Path) {
    let out = run_in(dir, &["init", "--out", "cfg.json", "--output-dir", "out"]);
    assert!(out.status.success());
    let path = dir.join("cfg.json");
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    cfg["dataset"]["n_per_class"] = 40.into();
    cfg["train"]["epochs"] = 4.into();
    cfg["seeds"] = serde_json::json!([7, 8]);
    for (_, u) in cfg["unlearn"].as_object_mut().unwrap() {
        u["t_out"] = 10.into();
        u["epochs"] = 2.into();
    }
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn verify_all_passes() {
    let out = bin().args(["verify", "--suite", "all"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let checks: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let checks = checks.as_array().unwrap();
    assert_eq!(checks.len(), 5);
    assert!(checks.iter().all(|c| c["pass"] == Value::Bool(true)));
}

#[test]
fn unknown_method_is_usage_error() {
    let out = bin()
        .args(["unlearn", "--config", "c.json", "--method", "nosuch", "--pretrained", "p", "--split", "s"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nosuch"));
}

#[test]
fn unknown_flag_and_suite_are_usage_errors() {
    assert_eq!(bin().args(["verify", "--bogus"]).output().unwrap().status.code(), Some(2));
    assert_eq!(bin().args(["verify", "--suite", "nope"]).output().unwrap().status.code(), Some(2));
}

#[test]
fn missing_config_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["pretrain", "--config", "absent.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn staged_pipeline_writes_provenance_and_self_eval_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_config(d);

    let out = run_in(d, &["pretrain", "--config", "cfg.json", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pre = stdout(&out);
    let split = "out/seed_7/split.json";
    assert!(d.join(split).exists());

    let out = run_in(d, &["retrain", "--config", "cfg.json", "--seed", "7", "--split", split]);
    assert!(out.status.success());
    let rt = stdout(&out);

    let out = run_in(
        d,
        &["unlearn", "--config", "cfg.json", "--seed", "7", "--method", "ga", "--pretrained", &pre, "--split", split],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ga = stdout(&out);

    for stage in [&pre, &rt, &ga] {
        let prov: Value =
            serde_json::from_str(&std::fs::read_to_string(d.join(stage).join("provenance.json")).unwrap()).unwrap();
        assert_eq!(prov["seed"], 7);
    }

    let out = run_in(d, &["eval", "--model", &rt, "--reference", &rt, "--split", split, "--out", "self.json"]);
    assert!(out.status.success());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("self.json")).unwrap()).unwrap();
    assert_eq!(report["avg_d"].as_f64(), Some(0.0));
    assert_eq!(report["kl_to_ref"].as_f64(), Some(0.0));

    let out = run_in(
        d,
        &["eval", "--model", &ga, "--reference", &rt, "--split", split, "--out", "out/seed_7/reports/ga.json"],
    );
    assert!(out.status.success());
    let out = run_in(d, &["report", "--dir", "out"]);
    assert!(out.status.success());
    let table = stdout(&out);
    assert!(table.lines().any(|l| l.starts_with("| ga |")), "{table}");
}

#[test]
fn run_aggregates_every_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_config(d);
    let out = run_in(d, &["run", "--config", "cfg.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for seed in [7, 8] {
        for m in ["sfr_on", "ft", "ga", "rl", "salun", "joint"] {
            assert!(d.join(format!("out/seed_{seed}/reports/{m}.json")).exists());
            assert!(d.join(format!("out/seed_{seed}/unlearn/{m}/provenance.json")).exists());
        }
    }
    let summary = std::fs::read_to_string(d.join("out/summary.md")).unwrap();
    // header, six methods, the reference and the second reference
    assert_eq!(summary.lines().filter(|l| l.starts_with("| ")).count(), 9);
    assert!(summary.lines().any(|l| l.starts_with("| rt |")));
    assert!(summary.contains("±"));
}
