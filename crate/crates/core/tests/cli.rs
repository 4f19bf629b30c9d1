use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL_STUDY: &str = r#"{
  "schema_version": 1,
  "seed": 3,
  "coefficient": "laminate(1,4)",
  "study": { "cells": [2, 4, 8], "sub": 8 }
}"#;

fn homog(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_homog"))
        .args(args)
        .env_remove("HOMOG_OUT")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn without_seconds(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split(',').collect();
            cols.pop();
            cols.join(",")
        })
        .collect()
}

fn strip_seconds(report: &mut Value) {
    for row in report["rows"].as_array_mut().unwrap() {
        row.as_object_mut().unwrap().remove("seconds");
    }
}

#[test]
fn correctors_then_defect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "cb.json",
        r#"{"schema_version": 1, "coefficient": "checkerboard(1,10)", "study": {"sub": 16}}"#,
    );
    let out = dir.path().join("out");
    let o = homog(&["correctors", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["chi_1.vtk", "chi_2.vtk", "tensor.json", "config.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let tensor: Value = serde_json::from_str(&fs::read_to_string(out.join("tensor.json")).unwrap()).unwrap();
    let a11 = tensor["matrix"][0][0].as_f64().unwrap();
    let a22 = tensor["matrix"][1][1].as_f64().unwrap();
    assert!((a11 - a22).abs() <= 1e-9 * a11);
    // geometric mean lies between the harmonic and arithmetic means
    assert!(a11 > 10f64.sqrt() && a11 < 5.5);

    let chi = out.join("chi_1.vtk");
    let o = homog(&["defect", "--field", chi.to_str().unwrap(), "--header"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "defect_1,defect_2,lift_distance,projection_distance");
    let vals: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    // correctors are periodic, so nothing to repair
    assert!(vals.iter().all(|v| v.abs() < 1e-6), "{vals:?}");
}

#[test]
fn study_is_reproducible_and_echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lam.json", SMALL_STUDY);
    let run = |name: &str, config: &str| {
        let out = dir.path().join(name);
        let o = homog(&["study", "--serial", "--config", config, "--out", out.to_str().unwrap()]);
        assert!(matches!(o.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a", &cfg);
    let b = run("b", &cfg);
    let csv_a = fs::read_to_string(a.join("errors.csv")).unwrap();
    let csv_b = fs::read_to_string(b.join("errors.csv")).unwrap();
    assert_eq!(
        csv_a.lines().next().unwrap(),
        "eps,h,l2_err,h1_corr_err,h1_plain_err,slope_l2,slope_h1,cg_iters,seconds"
    );
    assert_eq!(csv_a.lines().count(), 4);
    assert_eq!(without_seconds(&csv_a), without_seconds(&csv_b));

    let summary: Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    let echoed = write(dir.path(), "echo.json", &summary["config"].to_string());
    let c = run("c", &echoed);
    let resummary: Value = serde_json::from_str(&fs::read_to_string(c.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"], resummary["config"]);
    let (mut r1, mut r2) = (summary["report"].clone(), resummary["report"].clone());
    strip_seconds(&mut r1);
    strip_seconds(&mut r2);
    assert_eq!(r1, r2);
}

#[test]
fn failed_flags_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "strict.json",
        r#"{"schema_version": 1, "coefficient": "laminate(1,4)",
            "study": {"cells": [2, 4, 8], "sub": 8, "thresholds": {"min_h1_slope": 5.0}}}"#,
    );
    let out = dir.path().join("out");
    let o = homog(&["study", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], Value::Bool(false));
}

#[test]
fn config_errors_exit_three_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"schema_version": 1, "coefficient": "laminate(1,4)", "study": {"cels": [4]}}"#, "cels"),
        (r#"{"schema_version": 1, "coefficient": "laminate(1,4)", "study": {"cells": [3]}}"#, "study.cells"),
        (r#"{"schema_version": 9, "coefficient": "identity"}"#, "schema_version"),
        (r#"{"schema_version": 1, "coefficient": "plaid"}"#, "coefficient"),
    ];
    for (i, (text, field)) in cases.iter().enumerate() {
        let cfg = write(dir.path(), &format!("bad{i}.json"), text);
        let o = homog(&["study", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(3), "case {i}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(field), "case {i}: {err}");
    }
    let o = homog(&["study", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn non_convergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "tight.json",
        r#"{"schema_version": 1, "coefficient": "checkerboard(1,100)",
            "study": {"sub": 16}, "solver": {"max_iterations": 3}}"#,
    );
    let o = homog(&["correctors", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("correctors"));
}

#[test]
fn env_var_overrides_out_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "id.json",
        r#"{"schema_version": 1, "coefficient": "identity", "study": {"sub": 4}}"#,
    );
    let env_out = dir.path().join("from_env");
    let flag_out = dir.path().join("from_flag");
    let o = Command::new(env!("CARGO_BIN_EXE_homog"))
        .args(["correctors", "--config", &cfg, "--out", flag_out.to_str().unwrap()])
        .env("HOMOG_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_out.join("tensor.json").exists());
    assert!(!flag_out.exists());
}

#[test]
fn twoscale_writes_ratios_and_slices() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "ts.json",
        r#"{"schema_version": 1, "coefficient": "identity", "shape": "l_shape",
            "twoscale": {"cells": [2, 4], "sub": 4, "y_resolution": 4, "field": "random", "dump_cells": [[0, 0], [1, 3]]}}"#,
    );
    let out = dir.path().join("out");
    let o = homog(&["twoscale", "--workers", "2", "--seed", "5", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("twoscale.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let index: Value = serde_json::from_str(&fs::read_to_string(out.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["cells"].as_array().unwrap().len(), 2);
    assert!(out.join("cell_1_3.vtk").exists());
    let echo: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 5);

    // [3, 3] lies in the removed quadrant of the 4×4 L-shape
    let bad = write(
        dir.path(),
        "ts_bad.json",
        r#"{"schema_version": 1, "coefficient": "identity", "shape": "l_shape",
            "twoscale": {"cells": [4], "sub": 4, "dump_cells": [[3, 3]]}}"#,
    );
    let o = homog(&["twoscale", "--config", &bad, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
