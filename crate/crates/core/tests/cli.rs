use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn landau(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_landau"))
        .args(args)
        .env_remove("LANDAU_THREADS")
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.in.json");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn lorentzian_stability_exits_zero_with_known_roots() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"equilibrium": {"family": "lorentzian", "A": 0.5}, "stability": {"n_modes": 1}}"#,
    );
    let out = dir.path().join("out");
    assert_eq!(
        landau(&["stability", "--config", &config, "--out", out.to_str().unwrap()]),
        0
    );
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["verdict"], "stable");
    let resolved = read_json(&out.join("config.json"));
    assert_eq!(resolved["workflow"], "stability");
    assert!(resolved["green"]["n_max"].is_number());
}

#[test]
fn unstable_quartic_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"equilibrium": {"family": "quartic-gaussian", "params": {"a": 4.0}}, "stability": {"n_modes": 1}}"#,
    );
    let out = dir.path().join("out");
    assert_eq!(
        landau(&["stability", "--config", &config, "--out", out.to_str().unwrap()]),
        2
    );
    assert_eq!(read_json(&out.join("report.json"))["verdict"], "unstable");
}

#[test]
fn malformed_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"equilibrium": {"family": "maxwellian""#);
    let out = dir.path().join("out");
    assert_eq!(
        landau(&["stability", "--config", &config, "--out", out.to_str().unwrap()]),
        1
    );
    let config = write_config(dir.path(), r#"{"equilibrium": {"family": "cauchy"}}"#);
    assert_eq!(
        landau(&["stability", "--config", &config, "--out", out.to_str().unwrap()]),
        1
    );
    assert_eq!(landau(&["stability", "--config", "/nonexistent/config.json"]), 1);
}

#[test]
fn zero_perturbation_gives_zero_linear_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"perturbation": {"eps": 0.0, "modes": [{"n": 1, "profile": "gaussian"}]}, "linear": {"t_end": 5.0, "z_points": 8}}"#,
    );
    let out = dir.path().join("out");
    assert_eq!(
        landau(&["linear", "--config", &config, "--out", out.to_str().unwrap()]),
        0
    );
    let mut reader = csv::Reader::from_path(out.join("field.csv")).unwrap();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.unwrap();
        for value in record.iter().skip(2) {
            assert_eq!(value.parse::<f64>().unwrap(), 0.0);
        }
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn freestream_and_green_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"freestream": {"t_end": 5.0, "z_points": 8}, "green": {"horizon": 3.0, "step": 0.05, "z_points": 16}}"#,
    );
    let out = dir.path().join("fs");
    assert_eq!(
        landau(&["freestream", "--config", &config, "--out", out.to_str().unwrap()]),
        0
    );
    assert!(out.join("h.csv").exists());
    assert_eq!(read_json(&out.join("decay.json"))["passed"], true);

    let out = dir.path().join("green");
    assert_eq!(
        landau(&[
            "green",
            "--config",
            &config,
            "--out",
            out.to_str().unwrap(),
            "--threads",
            "1"
        ]),
        0
    );
    for f in ["green.json", "q.csv", "qz.csv", "invariants.json", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let invariants = read_json(&out.join("invariants.json"));
    assert_eq!(invariants["causality_passed"], true);
    assert!(invariants["max_slice_mean"].as_f64().unwrap() < 1e-8);
}

#[test]
fn green_refuses_an_unstable_equilibrium() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"equilibrium": {"family": "quartic-gaussian", "params": {"a": 4.0}}, "green": {"horizon": 2.0}}"#,
    );
    let out = dir.path().join("out");
    assert_eq!(
        landau(&["green", "--config", &config, "--out", out.to_str().unwrap()]),
        2
    );
}

#[test]
fn nonlinear_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"nonlinear": {"gamma": 0.36, "t_max": 20.0, "z_points": 16, "spot_checks": 4,
            "snapshot_times": [0.0, 2.0], "green": {"z_points": 16}}}"#,
    );
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            assert_eq!(
                landau(&[
                    "nonlinear",
                    "--config",
                    &config,
                    "--out",
                    out.to_str().unwrap(),
                    "--seed",
                    "7"
                ]),
                0
            );
            out
        })
        .collect();
    for f in ["e.csv", "h.csv", "rho.csv", "f_0.000.csv", "f_2.000.csv"] {
        let a = std::fs::read(runs[0].join(f)).unwrap();
        let b = std::fs::read(runs[1].join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
    let report = read_json(&runs[0].join("convergence.json"));
    assert_eq!(report["converged"], true);
    let spots = read_json(&runs[0].join("characteristics.json"));
    assert_eq!(spots["seed"], 7);
    assert!(spots["max_difference"].as_f64().unwrap() < 1e-9);
    assert_eq!(read_json(&runs[0].join("config.json"))["seed"], 7);
}
