use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn igsaft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_igsaft")).args(args).output().unwrap()
}

fn export(dir: &Path, n: usize, p: usize) -> String {
    let path = dir.join("data.csv");
    let out = igsaft(&[
        "simulate",
        "--n",
        &n.to_string(),
        "--p",
        &p.to_string(),
        "--cr",
        "0.2",
        "--export",
        path.to_str().unwrap(),
        "--rep",
        "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path.to_str().unwrap().to_string()
}

const COLS: [&str; 6] = ["--time", "time", "--status", "status", "--exposure", "exposure"];

#[test]
fn fit_writes_report_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = export(dir.path(), 800, 4);
    let out_path = dir.path().join("fit.json");
    let mut args = vec!["fit", "--data", &data];
    args.extend(COLS);
    args.extend(["--iv", "z1..z4", "--gel", "el,cue", "--seed", "3", "--out", out_path.to_str().unwrap()]);
    let out = igsaft(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("beta ="));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    for key in ["beta_hat", "se", "ci", "exp_beta", "p_F", "p_overid", "report", "manifest"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let beta = v["beta_hat"].as_f64().unwrap();
    assert!((v["exp_beta"]["estimate"].as_f64().unwrap() - beta.exp()).abs() < 1e-12);
    assert_eq!(v["report"]["fits"].as_array().unwrap().len(), 2);
    let m = &v["manifest"];
    assert_eq!(m["seeds"]["fold"], 3);
    assert_eq!(m["input_hashes"][&data].as_str().unwrap().len(), 64);
    assert_eq!(m["config"]["families"], serde_json::json!(["el", "cue"]));

    // same inputs, same answer
    let again = dir.path().join("fit2.json");
    let mut args2 = args.clone();
    *args2.last_mut().unwrap() = again.to_str().unwrap();
    assert!(igsaft(&args2).status.success());
    let w: Value = serde_json::from_str(&std::fs::read_to_string(&again).unwrap()).unwrap();
    assert_eq!(v["beta_hat"], w["beta_hat"]);
    assert_eq!(v["se"], w["se"]);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = export(dir.path(), 600, 4);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"q": 2, "families": ["cue"], "max_keep": 3, "seed": 7}"#).unwrap();
    let out_path = dir.path().join("fit.json");
    let mut args = vec!["fit", "--data", &data];
    args.extend(COLS);
    args.extend(["--iv", "z1,z2,z3,z4", "--config", cfg.to_str().unwrap(), "--seed", "11"]);
    args.extend(["--out", out_path.to_str().unwrap()]);
    let out = igsaft(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let c = &v["manifest"]["config"];
    assert_eq!(c["families"], serde_json::json!(["cue"]));
    assert_eq!(c["max_keep"], 3);
    assert_eq!(c["seed"], 11);
    assert!(v["report"]["m"].as_u64().unwrap() <= 3);
}

#[test]
fn dump_moments_writes_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let data = export(dir.path(), 500, 3);
    let dump = dir.path().join("psi.csv");
    let mut args = vec!["fit", "--data", &data];
    args.extend(COLS);
    args.extend(["--iv", "z1..z3", "--no-screening", "--dump-moments", dump.to_str().unwrap()]);
    let out = igsaft(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&dump).unwrap();
    assert_eq!(text.lines().count(), 501);
    // report goes to stdout when --out is absent
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["report"]["m"], 3);
}

#[test]
fn diagnose_reports_tests() {
    let dir = tempfile::tempdir().unwrap();
    let data = export(dir.path(), 800, 4);
    let mut args = vec!["diagnose", "--data", &data];
    args.extend(COLS);
    args.extend(["--iv", "z1..z4"]);
    let out = igsaft(&args);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["p_F"].as_f64().unwrap() < 0.05);
    assert!(v["p_overid"].is_number());

    let mut just = vec!["diagnose", "--data", &data];
    just.extend(COLS);
    just.extend(["--iv", "z1,z2", "--no-screening"]);
    let out = igsaft(&just);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["over_id"].as_str().unwrap().contains("not applicable (just identified)"));
    assert!(v["p_overid"].is_null());
}

#[test]
fn simulate_writes_table_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("mc.csv");
    let out = igsaft(&[
        "--threads", "1", "simulate", "--n", "400", "--p", "3", "--reps", "2", "--out", table.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("Method,Bias,SD,SE,CP"));
    assert!(text.contains("iGSAFT-EL") && text.contains("AFT"));
    let side: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("mc.csv.json")).unwrap()).unwrap();
    assert_eq!(side["summary"]["replications"].as_array().unwrap().len(), 2);
    assert_eq!(side["manifest"]["seeds"]["simulation"], 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = export(dir.path(), 300, 3);
    assert_eq!(igsaft(&["--help"]).status.code(), Some(0));
    assert_eq!(igsaft(&["--version"]).status.code(), Some(0));
    assert_eq!(igsaft(&["fit", "--bogus"]).status.code(), Some(1));
    assert_eq!(igsaft(&["simulate", "--case", "9"]).status.code(), Some(1));

    let run = |extra: &[&str]| {
        let mut args = vec!["fit", "--data", data.as_str()];
        args.extend(COLS);
        args.extend(extra);
        igsaft(&args).status.code()
    };
    assert_eq!(run(&["--iv", "z1..z3", "--q", "7"]), Some(1));
    assert_eq!(run(&["--iv", "nope"]), Some(1));
    assert_eq!(run(&["--iv", "z1..z3", "--bandwidth", "-2"]), Some(1));
    assert_eq!(run(&["--iv", "z1..z3", "--gel", "gmm"]), Some(1));

    let missing = igsaft(&["fit", "--data", "/no/such.csv", "--time", "t", "--status", "s", "--exposure", "d", "--iv", "z1"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}

#[test]
fn exported_file_refits_bit_for_bit() {
    use igsaft_core::pipeline::{fit_igsaft, FitConfig};
    use igsaft_core::simulate::{generate, SimConfig};

    let dir = tempfile::tempdir().unwrap();
    let data = export(dir.path(), 700, 4);
    let sim = SimConfig { n: 700, p: 4, target_cr: 0.2, ..SimConfig::default() };
    let (d, _) = generate(&sim, 0).unwrap();
    let direct = fit_igsaft(&d, &FitConfig::default()).unwrap();
    let mut args = vec!["fit", "--data", &data];
    args.extend(COLS);
    args.extend(["--iv", "z1..z4"]);
    let out = igsaft(&args);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["beta_hat"].as_f64().unwrap().to_bits(), direct.gel_fit().beta_hat.to_bits());
    assert_eq!(v["se"].as_f64().unwrap().to_bits(), direct.gel_fit().se.to_bits());
}

#[test]
fn missing_flag_is_named() {
    let out = igsaft(&["fit", "--data", "x.csv", "--time", "t", "--status", "s", "--iv", "z1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--exposure"));
}

#[test]
fn single_replication_reports_na_sd() {
    let out = igsaft(&["simulate", "--n", "300", "--p", "3", "--reps", "1", "--no-aft"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let row = text.lines().nth(1).unwrap();
    assert_eq!(row.split(',').nth(2), Some("NA"));
}

#[test]
fn simulate_table_is_deterministic_across_threads() {
    let run = |threads: &str| {
        igsaft(&["--threads", threads, "simulate", "--n", "400", "--p", "3", "--reps", "3", "--seed", "7"]).stdout
    };
    assert_eq!(run("1"), run("2"));
}
