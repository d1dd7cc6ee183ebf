use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn cireg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cireg"))
        .args(args)
        .env_remove("CONTACT_INTERVAL_THREADS")
        .output()
        .expect("run cireg")
}

fn ok(args: &[&str]) -> Output {
    let out = cireg(args);
    assert!(
        out.status.success(),
        "cireg {args:?} failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Households of three: an imported index case, one secondary case whose
/// only possible infector is the index, and one member never infected.
fn degenerate_households(dir: &Path) -> PathBuf {
    let mut csv = String::from("id,group,t_infection,latent,infectious_period,obs_limit,imported,infector,inf_x,sus_x\n");
    for h in 0..40u64 {
        let (index, second, third) = (3 * h, 3 * h + 1, 3 * h + 2);
        let t = 0.15 + ((h * 37) % 23) as f64 * 0.11;
        let bit = |k: u64| (k * 7 + h * 3) % 5 % 2;
        writeln!(csv, "{index},{h},0,0,3,10,1,,{},{}", bit(1), bit(2)).unwrap();
        writeln!(csv, "{second},{h},{t},0,2,10,0,{index},{},{}", bit(3), bit(4)).unwrap();
        writeln!(csv, "{third},{h},inf,0,,10,0,,{},{}", bit(5), (h % 3 == 0) as u8).unwrap();
    }
    let path = dir.join("households.csv");
    fs::write(&path, csv).unwrap();
    path
}

fn simulated(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("sim{seed}"));
    ok(&[
        "simulate", "--nodes", "400", "--infections", "50", "--beta", "0.4,-0.4,0.3", "--seed", seed, "-o",
        s(&out),
    ]);
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert!(cireg(&["--help"]).status.success());
    assert!(cireg(&["fit-em", "--help"]).status.success());
    let v = cireg(&["--version"]);
    assert!(v.status.success());
    assert!(String::from_utf8_lossy(&v.stdout).starts_with("cireg "));
}

#[test]
fn usage_errors_exit_three() {
    assert_eq!(cireg(&["fit", "--bogus"]).status.code(), Some(3));
    assert_eq!(cireg(&["fit"]).status.code(), Some(3));
    assert_eq!(cireg(&["fit", "--line-list", "a.csv", "--pairs-in", "b.csv"]).status.code(), Some(3));
    assert_eq!(cireg(&["simulate", "--beta", "1,2", "-o", "x"]).status.code(), Some(3));
    let tmp = TempDir::new().unwrap();
    let data = degenerate_households(tmp.path());
    assert_eq!(cireg(&["fit", "--line-list", s(&data), "--alpha", "1.5"]).status.code(), Some(3));
}

#[test]
fn data_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(cireg(&["fit", "--line-list", s(&tmp.path().join("missing.csv"))]).status.code(), Some(1));
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "id,group,t_infection,latent,infectious_period,obs_limit,imported\n1,a,0,0,0,5,1\n").unwrap();
    let out = cireg(&["fit", "--line-list", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn em_without_convergence_exits_two() {
    let tmp = TempDir::new().unwrap();
    let sim = simulated(tmp.path(), "5");
    let out = cireg(&[
        "fit-em", "--line-list", s(&sim.join("line_list.csv")), "--contacts", s(&sim.join("contacts.csv")),
        "--max-em", "2", "--em-tol", "1e-14", "--json-out", s(&tmp.path().join("em.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&tmp.path().join("em.json"))["converged"], Value::Bool(false));
}

#[test]
fn simulate_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = simulated(tmp.path(), "9");
    let b = tmp.path().join("again");
    ok(&["simulate", "--nodes", "400", "--infections", "50", "--beta", "0.4,-0.4,0.3", "--seed", "9", "-o", s(&b)]);
    for f in ["line_list.csv", "contacts.csv", "truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let truth = json(&a.join("truth.json"));
    assert_eq!(truth["beta_sus"], -0.4);
    assert_eq!(truth["infections"], 51);
}

#[test]
fn pairs_export_round_trips_through_fit() {
    let tmp = TempDir::new().unwrap();
    let sim = simulated(tmp.path(), "21");
    let (ll, ct) = (sim.join("line_list.csv"), sim.join("contacts.csv"));
    let rows = tmp.path().join("rows.csv");
    ok(&["pairs", "--line-list", s(&ll), "--contacts", s(&ct), "-o", s(&rows)]);
    let header = fs::read_to_string(&rows).unwrap();
    assert!(header.starts_with("i,j,start,stop,event,candidate,stratum,weight,inf:inf_x,sus:sus_x,pair:pair_x\n"));

    let (direct, via) = (tmp.path().join("direct"), tmp.path().join("via"));
    for (dir, input) in [(&direct, vec!["--line-list", s(&ll), "--contacts", s(&ct)]), (&via, vec!["--pairs-in", s(&rows)])] {
        fs::create_dir_all(dir).unwrap();
        let mut args = vec!["fit"];
        args.extend(input);
        let (j, b) = (dir.join("fit.json"), dir.join("baseline.csv"));
        args.extend(["--json-out", s(&j), "--baseline-out", s(&b)]);
        ok(&args);
    }
    for f in ["fit.json", "baseline.csv"] {
        assert_eq!(fs::read(direct.join(f)).unwrap(), fs::read(via.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn fit_em_matches_fit_when_every_infectee_has_one_candidate() {
    let tmp = TempDir::new().unwrap();
    let data = degenerate_households(tmp.path());
    let p = |n: &str| tmp.path().join(n);
    ok(&["fit", "--line-list", s(&data), "--json-out", s(&p("fit.json")), "--baseline-out", s(&p("fit.csv"))]);
    ok(&["fit-em", "--line-list", s(&data), "--json-out", s(&p("em.json")), "--baseline-out", s(&p("em.csv"))]);
    let (fit, em) = (json(&p("fit.json")), json(&p("em.json")));
    let coefs = |v: &Value| -> Vec<f64> {
        v["coefficients"].as_array().unwrap().iter().map(|c| c["estimate"].as_f64().unwrap()).collect()
    };
    let (a, b) = (coefs(&fit), coefs(&em));
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
    }
    assert_eq!(em["em_iterations"], 2);
    // Point estimates coincide exactly. With every p_ij = 1 the variance
    // terms reduce to the complete-data ones up to rounding.
    let table = |path: &Path| -> Vec<Vec<String>> {
        fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(String::from).collect()).collect()
    };
    let (a, b) = (table(&p("fit.csv")), table(&p("em.csv")));
    assert_eq!(a.len(), b.len());
    assert_eq!(a[0], b[0]);
    for (x, y) in a.iter().zip(&b).skip(1) {
        assert_eq!(x[..2], y[..2]);
        let (vx, vy): (f64, f64) = (x[2].parse().unwrap(), y[2].parse().unwrap());
        assert!((vx - vy).abs() <= 1e-12 * vx.max(1e-300), "{vx} vs {vy}");
    }
}

#[test]
fn nelson_aalen_matches_fit_em_without_covariates() {
    let tmp = TempDir::new().unwrap();
    let sim = simulated(tmp.path(), "33");
    let (ll, ct) = (sim.join("line_list.csv"), sim.join("contacts.csv"));
    let (na, em) = (tmp.path().join("na.csv"), tmp.path().join("em.csv"));
    ok(&["nelson-aalen", "--line-list", s(&ll), "--contacts", s(&ct), "-o", s(&na)]);
    ok(&[
        "fit-em", "--line-list", s(&ll), "--contacts", s(&ct), "--no-covariates", "--baseline-out", s(&em),
        "--json-out", s(&tmp.path().join("em.json")),
    ]);
    let text = fs::read_to_string(&na).unwrap();
    assert!(text.starts_with("tau,cumhaz,var,lo,hi\n"));
    assert_eq!(text, fs::read_to_string(&em).unwrap());
}

#[test]
fn fit_em_writes_weights_and_trace() {
    let tmp = TempDir::new().unwrap();
    let sim = simulated(tmp.path(), "44");
    let (w, t) = (tmp.path().join("w.csv"), tmp.path().join("t.csv"));
    ok(&[
        "fit-em", "--line-list", s(&sim.join("line_list.csv")), "--contacts", s(&sim.join("contacts.csv")),
        "--weights-out", s(&w), "--trace-out", s(&t), "--json-out", s(&tmp.path().join("em.json")),
    ]);
    let weights = fs::read_to_string(&w).unwrap();
    assert!(weights.starts_with("j,i,p_ij\n"));
    let mut per_infectee = std::collections::BTreeMap::<u64, f64>::new();
    for line in weights.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *per_infectee.entry(f[0].parse().unwrap()).or_default() += f[2].parse::<f64>().unwrap();
    }
    assert_eq!(per_infectee.len(), 50);
    assert!(per_infectee.values().all(|s| (s - 1.0).abs() < 1e-12));
    let trace = fs::read_to_string(&t).unwrap();
    assert!(trace.starts_with("iteration,expected_loglik,"));
    let em = json(&tmp.path().join("em.json"));
    assert_eq!(trace.lines().count() - 1, em["em_iterations"].as_u64().unwrap() as usize);
}

#[test]
fn coverage_study_writes_expected_schema() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("study.json");
    fs::write(
        &cfg,
        r#"{"n_nodes": 300, "infections": 25, "replicates": 2, "seed": 7,
            "cells": [{"weibull_shape": 0.5, "weibull_rate": 0.2, "varied": "inf", "others": 0.0},
                      {"weibull_shape": 2.0, "weibull_rate": 0.6, "varied": "pair", "others": 0.0}]}"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_cireg"))
        .args(["coverage-study", "--config", s(&cfg), "--replicates", "3", "--jobs", "0", "-o", s(&out)])
        .env("CONTACT_INTERVAL_THREADS", "2")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let header = |f: &str| fs::read_to_string(out.join(f)).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header("coverage_beta.csv"), "cell,weibull_shape,varied,param,estimator,n,coverage,mean_width");
    assert_eq!(header("coverage_baseline.csv"), "weibull_shape,estimator,quantile,n,coverage");
    assert_eq!(header("ci_widths.csv"), "cell,replicate,weibull_shape,param,width_hat,width_tilde");
    assert!(header("replicates.csv").starts_with("cell,replicate,seed,attempts,estimator,"));
    let beta = fs::read_to_string(out.join("coverage_beta.csv")).unwrap();
    // 2 cells x 3 parameters x 2 estimators.
    assert_eq!(beta.lines().count(), 1 + 12);
    let reps = fs::read_to_string(out.join("replicates.csv")).unwrap();
    // One row per replicate and estimator.
    assert_eq!(reps.lines().count(), 1 + 2 * 6);
}
