use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qsr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsr"))
        .args(args)
        .current_dir(dir)
        .env_remove("QSR_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = qsr(dir, args);
    assert!(out.status.success(), "qsr {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path.join("manifest.json")).unwrap()).unwrap()
}

fn csv_column(path: &Path, column: &str) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == column).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn synth_tomo_reconstruct_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let grid = ["--grid-min", "5", "--grid-max", "13.25", "--grid-count", "40"];
    let mut synth = vec!["synth", "--current-min", "5", "--current-max", "13.25", "--current-count", "40"];
    synth.extend(grid);
    synth.extend(["--state", "coherent:2", "--out", "s"]);
    ok(d, &synth);
    let mut tomo = vec!["tomo", "s/dataset.csv", "--out", "t"];
    tomo.extend(grid);
    ok(d, &tomo);

    let residuals: Vec<f64> = csv_column(&d.join("t/residuals.csv"), "residual")
        .iter()
        .map(|r| r.parse().unwrap())
        .collect();
    assert_eq!(residuals.len(), 40);
    assert!(residuals.iter().all(|&r| r < 1e-8), "{residuals:?}");
    assert_eq!(manifest(&d.join("t"))["outputs"].as_array().unwrap().len(), 3);

    ok(
        d,
        &["reconstruct", "t/povm.json", "s/rates.csv", "--iterations", "50000", "--family", "coherent", "--out", "r"],
    );
    let m = manifest(&d.join("r"));
    let f = m["summary"]["families"]["coherent"]["fidelity"].as_f64().unwrap();
    assert!(f > 0.999, "fidelity {f}");
    assert!((m["summary"]["mean_photon_number"].as_f64().unwrap() - 2.0).abs() < 0.05);
    let chi_c = m["summary"]["families"]["coherent"]["chi2"].as_f64().unwrap();
    let chi_t = m["summary"]["families"]["thermal"]["chi2"].as_f64().unwrap();
    assert!(chi_c < chi_t);
    let rec = qsr_core::io::load_reconstruction(&d.join("r/reconstruction.json")).unwrap();
    assert_eq!(rec.iterations_run, 50_000);
    assert_eq!(csv_column(&d.join("r/distribution.csv"), "n").len(), 31);
}

#[test]
fn default_gridding_gives_165_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--current-count", "12", "--power-count", "8", "--out", "s"]);
    ok(d, &["tomo", "s/dataset.csv", "--n-mr", "6", "--out", "t"]);
    let fit = qsr_core::io::load_povm(&d.join("t/povm.json")).unwrap();
    assert_eq!(fit.povm.n_settings(), 165);
    let first = fit.settings()[0].value();
    let last = fit.settings()[164].value();
    assert_eq!((first, last), (5.0, 13.25));
}

#[test]
fn single_current_data() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--current-min", "12", "--current-max", "12", "--current-count", "1", "--out", "s"]);
    ok(d, &["tomo", "s/dataset.csv", "--no-grid", "--out", "a"]);
    ok(d, &["tomo", "s/dataset.csv", "--grid-min", "12", "--grid-max", "12", "--grid-count", "1", "--out", "b"]);
    for out in ["a", "b"] {
        let fit = qsr_core::io::load_povm(&d.join(out).join("povm.json")).unwrap();
        assert_eq!(fit.povm.n_settings(), 1);
    }
}

#[test]
fn one_iteration_is_a_valid_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--current-count", "10", "--grid-count", "10", "--state", "thermal:1", "--out", "s"]);
    ok(d, &["tomo", "s/dataset.csv", "--grid-count", "10", "--out", "t"]);
    ok(d, &["reconstruct", "t/povm.json", "s/rates.csv", "--iterations", "1", "--out", "r"]);
    let rec = qsr_core::io::load_reconstruction(&d.join("r/reconstruction.json")).unwrap();
    assert_eq!(rec.iterations_run, 1);
    assert_eq!(rec.loglik_trace.len(), 2);
    assert!((rec.rho.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn seed_flag_overrides_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let run = |out: &str, env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_qsr"));
        cmd.current_dir(d).env_remove("QSR_SEED");
        cmd.args(["synth", "--current-count", "3", "--noise", "0.02", "--out", out]);
        if let Some(s) = env {
            cmd.env("QSR_SEED", s);
        }
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        assert!(cmd.output().unwrap().status.success());
        (fs::read(d.join(out).join("dataset.csv")).unwrap(), manifest(&d.join(out))["seed"].as_u64().unwrap())
    };
    let from_env = run("env", Some("5"), None);
    let from_flag = run("flag", None, Some("5"));
    let both = run("both", Some("5"), Some("6"));
    let default = run("default", None, None);
    assert_eq!(from_env, from_flag);
    assert_eq!(from_env.1, 5);
    assert_eq!(both.1, 6);
    assert_ne!(both.0, from_env.0);
    assert_eq!(default.1, 1);
}

#[test]
fn same_povm_compares_to_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--current-count", "12", "--out", "s"]);
    ok(d, &["tomo", "s/dataset.csv", "--grid-count", "30", "--n-mr", "10", "--out", "t"]);
    ok(
        d,
        &["crb", "--povm", "t/povm.json", "--compare", "t/povm.json", "--settings", "20", "--n-mr", "6", "--out", "c"],
    );
    let ratios = csv_column(&d.join("c/comparison.csv"), "ratio");
    assert_eq!(ratios.len(), 7);
    for r in ratios {
        assert_eq!(r.parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn default_crb_compares_against_apd() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["crb", "--out", "c"]);
    let m = manifest(&d.join("c"));
    assert_eq!(m["parameters"]["settings"], 100);
    let ratios: Vec<f64> = csv_column(&d.join("c/comparison.csv"), "ratio")
        .iter()
        .map(|r| r.parse().unwrap())
        .collect();
    assert!(ratios[1..=6].iter().all(|&r| r < 1.0), "{ratios:?}");
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = qsr(d, &["tomo", "missing.csv", "--out", "t"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.trim_end().lines().count() == 1, "{err}");
    assert!(!d.join("t").exists());

    fs::write(d.join("bad.csv"), "bias_current_uA,mean_photons_per_pulse,rate\n5,1,1.2\n").unwrap();
    let out = qsr(d, &["tomo", "bad.csv", "--no-grid", "--out", "t"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("1.2"));

    let out = qsr(d, &["crb", "--state", "squeezed:1", "--out", "c"]);
    assert_eq!(out.status.code(), Some(1));
}
