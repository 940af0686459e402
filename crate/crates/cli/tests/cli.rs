use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qmi-info")).args(args).output().expect("spawn qmi-info")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn synth_then_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "synth_cfg.json",
        r#"{"method": "qstab", "system": {"preset": "scalar-1d"}, "T": 20,
            "perturbation": {"kind": "measurement", "eps": 0.3}}"#,
    );
    let out_dir = dir.path().to_string_lossy().into_owned();
    let out = run(&["synth", "--config", &cfg, "--seed", "3", "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["result"]["status"], "informative_certified");
    assert!(dir.path().join("synth.json").exists());

    let vcfg = write(dir.path(), "verify.json", r#"{"result": "synth.json", "samples": 300}"#);
    let out = run(&["verify", "--config", &vcfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["passed"], true);
    assert_eq!(v["check"]["stabilization"]["violations"], 0);
}

#[test]
fn ar_and_hinf_methods_run() {
    let dir = tempfile::tempdir().unwrap();
    let ar = write(
        dir.path(),
        "ar.json",
        r#"{"method": "ar", "ar": {"a": [[[0.5]]], "b": [[[1.0]], [[0.3]]]}, "T": 30,
            "perturbation": {"kind": "measurement", "eps": 0.01}}"#,
    );
    let out = run(&["synth", "--config", &ar]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["true_system"]["A"].as_array().unwrap().len(), 2);

    let hinf = write(
        dir.path(),
        "hinf.json",
        r#"{"method": "hinf", "gamma": 60.0, "system": {"preset": "pendulum"}, "T": 20,
            "perturbation": {"kind": "measurement", "eps": 0.001}}"#,
    );
    let out = run(&["synth", "--config", &hinf]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["result"]["gamma"], 60.0);
}

#[test]
fn config_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", "{ not json");
    assert_eq!(run(&["exp-a", "--config", &bad]).status.code(), Some(4));
    let unknown = write(dir.path(), "unknown.json", r#"{"epsilon": 0.3}"#);
    assert_eq!(run(&["exp-a", "--config", &unknown]).status.code(), Some(4));
    let method = write(
        dir.path(),
        "method.json",
        r#"{"method": "lqr", "system": {"preset": "scalar-1d"}, "T": 5,
            "perturbation": {"kind": "measurement", "eps": 0.1}}"#,
    );
    assert_eq!(run(&["synth", "--config", &method]).status.code(), Some(4));
    assert_eq!(run(&["synth"]).status.code(), Some(4));
    assert_eq!(run(&["exp-z"]).status.code(), Some(4));
    let missing = dir.path().join("missing.json");
    assert_eq!(run(&["exp-a", "--config", missing.to_str().unwrap()]).status.code(), Some(4));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let cfg = write(d1.path(), "a.json", r#"{"samples": 200}"#);
    let o1 = run(&["exp-a", "--config", &cfg, "--seed", "3", "--out", d1.path().to_str().unwrap()]);
    let o2 = run(&["exp-a", "--config", &cfg, "--seed", "3", "--out", d2.path().to_str().unwrap()]);
    assert_eq!(o1.status.code(), Some(0));
    assert_eq!(o1.stdout, o2.stdout);
    for f in ["exp_a.json", "exp_a_ellipse.csv", "exp_a_band.csv", "exp_a_samples.csv"] {
        let a = std::fs::read(d1.path().join(f)).unwrap();
        let b = std::fs::read(d2.path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let csv = std::fs::read_to_string(d1.path().join("exp_a_samples.csv")).unwrap();
    assert!(csv.starts_with("# schema_version=1\na,b,rho,pass\n"));
    let o3 = run(&["exp-a", "--config", &cfg, "--seed", "4"]);
    assert_ne!(o1.stdout, o3.stdout);
}

#[test]
fn sweep_is_deterministic_under_parallelism() {
    let cfg_text = r#"{"T_grid": [4, 10], "repeat": 3, "samples": 50}"#;
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", cfg_text);
    let o1 = run(&["exp-c", "--config", &cfg, "--seed", "5"]);
    let o2 = run(&["exp-c", "--config", &cfg, "--seed", "5", "--repeat", "3"]);
    assert_eq!(o1.stdout, o2.stdout);
    assert_eq!(json(&o1)["config"]["repeat"], 3);
}

#[test]
fn timing_flag_records_wall_time() {
    let out = run(&["exp-b", "--timing"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(json(&out)["wall_time_ms"].is_u64());
    let out = run(&["exp-b"]);
    assert!(json(&out).get("wall_time_ms").is_none());
}
