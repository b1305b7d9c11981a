use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MODEL: &str = r#"{
  "features": {"input_dim": 1, "output_dim": 2, "kind": {"type": "polynomial", "degree": 1}},
  "measure": {"type": "box_lebesgue", "lower": [0], "upper": [1]},
  "theta": [1, 1]
}"#;

fn sqfam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqfam")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sqfam(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn kernel_is_symmetric_and_reusable() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", MODEL);
    let k = dir.path().join("k.json");
    ok(&["kernel", "--model", &m, "--out", k.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&k).unwrap()).unwrap();
    let mat = &v["matrix"];
    let e = |i: usize, j: usize| mat[i][j].as_f64().unwrap();
    assert!((e(0, 0) - 1.0 / 3.0).abs() < 1e-12);
    assert!((e(0, 1) - 0.5).abs() < 1e-12);
    assert_eq!(e(0, 1), e(1, 0));
    // a kernel file feeds straight back into density evaluation
    let x = write(dir.path(), "x.csv", "0.5\n");
    let d = ok(&["density", "--model", &m, "--kernel", k.to_str().unwrap(), "--data", &x]);
    let val: f64 = d.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((val - 2.25 / (7.0 / 3.0)).abs() < 1e-10);
}

#[test]
fn fit_reports_constraints_and_normalized_density() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", MODEL);
    let x = dir.path().join("x.csv");
    ok(&["sample", "--model", &m, "--count", "400", "--seed", "5", "--out", x.to_str().unwrap()]);
    let cfg = write(dir.path(), "fit.json", r#"{"epsilon": 0.001, "seed": 2}"#);
    let out = ok(&["fit", "--data", x.to_str().unwrap(), "--model", &m, "--config", &cfg]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["theta_hat"].as_array().unwrap().len(), 2);
    assert!(v["active_constraints"]["lower_bound"].is_boolean());
    assert!(v["active_constraints"]["radius"].is_boolean());
    assert_eq!(v["converged"], true);
}

#[test]
fn simulation_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sim.json",
        r#"{"theta_star": [1, 1], "n_list": [50, 100], "reps": 3, "master_seed": 11}"#,
    );
    let a = ok(&["simulate", "normality", "--config", &cfg]);
    let b = ok(&["--threads", "1", "simulate", "normality", "--config", &cfg]);
    assert_eq!(a, b);
}

#[test]
fn unknown_keys_are_usage_errors_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", &MODEL.replace("\"theta\"", "\"thetta\""));
    let out = sqfam(&["kernel", "--model", &m]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("thetta"));

    let good = write(dir.path(), "g.json", MODEL);
    let cfg = write(dir.path(), "fit.json", r#"{"max_iter": 3}"#);
    let x = write(dir.path(), "x.csv", "0.2\n0.7\n");
    let out = sqfam(&["fit", "--data", &x, "--model", &good, "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_iter"));
}

#[test]
fn csv_header_is_optional_and_width_checked() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", MODEL);
    let with = write(dir.path(), "a.csv", "x\n0.25\n0.75\n");
    let without = write(dir.path(), "b.csv", "0.25\n0.75\n");
    assert_eq!(
        ok(&["density", "--model", &m, "--data", &with]),
        ok(&["density", "--model", &m, "--data", &without])
    );
    let wide = write(dir.path(), "c.csv", "0.25,1\n0.75,2\n");
    assert_eq!(sqfam(&["density", "--model", &m, "--data", &wide]).status.code(), Some(1));
}

#[test]
fn numerical_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.json", &MODEL.replace("[1, 1]", "[0, 0]"));
    let x = write(dir.path(), "x.csv", "0.5\n");
    assert_eq!(sqfam(&["density", "--model", &m, "--data", &x]).status.code(), Some(2));
}
