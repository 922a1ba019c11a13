use std::path::Path;
use std::process::{Command, Output};

use dualframe::dataset::save_csv;
use dualframe::simgen::{gen_replication, Scenario, ScenarioConfig};

fn dualframe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualframe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_s1_data(dir: &Path, n_pop: usize) -> String {
    let mut cfg = ScenarioConfig::for_scenario(Scenario::S1);
    cfg.n_pop = n_pop;
    let ds = gen_replication(&cfg, 0).unwrap();
    let path = dir.join("s1.csv");
    save_csv(&ds, &path).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn simulate_writes_three_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("res");
    let o = dualframe(&[
        "--quiet", "simulate", "--scenario", "S1", "--reps", "2", "--seed", "1", "--n-pop", "1500",
        "--estimators", "p,np,eff", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["replications.csv", "summary.csv", "coverage.csv"] {
        let text = std::fs::read_to_string(out.join(f)).unwrap();
        assert!(text.lines().count() > 1, "{f} is empty");
    }
    let reps = std::fs::read_to_string(out.join("replications.csv")).unwrap();
    assert!(reps.lines().any(|l| l.starts_with("S1,1,eff,theta")));

    let o = dualframe(&["--quiet", "report", "--input", out.to_str().unwrap(), "--alpha", "0.1"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("eff"));
}

#[test]
fn missing_data_file_exits_one_and_names_it() {
    let o = dualframe(&["estimate", "--data", "/no/such/input.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/input.csv"));
}

#[test]
fn bad_flags_and_config_exit_one() {
    assert_eq!(dualframe(&["simulate", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(dualframe(&["simulate", "--variant", "dml3"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"folds": 5, "fodls": 3}"#).unwrap();
    let o = dualframe(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fodls"));
}

#[test]
fn version_flag() {
    let o = dualframe(&["--version"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("dualframe "));
}

#[test]
fn estimate_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_s1_data(dir.path(), 3000);
    let json = dir.path().join("r.json");
    let csv = dir.path().join("r.csv");
    let o = dualframe(&[
        "--quiet", "estimate", "--data", &data, "--estimator", "eff", "--col-x", "x",
        "--out", json.to_str().unwrap(), "--csv", csv.to_str().unwrap(), "--strict",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let theta = report["theta_hat"][0].as_f64().unwrap();
    assert!(theta.abs() < 0.5, "theta {theta}");
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("parameter,estimate,se,ci_lo,ci_hi"));
    assert!(table.contains("phi3,"));
}

#[test]
fn strict_mode_reports_non_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_s1_data(dir.path(), 3000);
    let args = ["--quiet", "estimate", "--data", &data, "--col-x", "x", "--estimator", "np", "--max-iter", "1"];
    assert_eq!(dualframe(&args).status.code(), Some(0));
    let mut strict = args.to_vec();
    strict.push("--strict");
    assert_eq!(dualframe(&strict).status.code(), Some(2));
}

#[test]
fn diagnose_passes_on_s1_and_fails_on_collinear_features() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_s1_data(dir.path(), 3000);
    let o = dualframe(&["--quiet", "diagnose-identifiability", "--data", &data, "--col-x", "x", "--draws", "5"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("PASS"));

    let o = dualframe(&[
        "--quiet", "diagnose-identifiability", "--data", &data, "--col-x", "x", "--draws", "5",
        "--features", "1,x,x", "--strict",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("FAIL"));
}
