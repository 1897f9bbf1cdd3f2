use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn basis(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_basis"))
        .arg("--output-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = basis(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&read(path)).unwrap()
}

fn csv_rows(path: impl AsRef<Path>) -> Vec<Vec<String>> {
    let text = read(path);
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

/// A population of `count` prompts and a 16-rollout table in `dir`.
fn fixture(dir: &Path, count: &str) -> (PathBuf, PathBuf) {
    ok(dir, &["gen-pop", "--count", count, "--seed", "7"]);
    let pop = dir.join("population.pop.json");
    ok(dir, &["gen-values", "--pop", pop.to_str().unwrap(), "--n", "16", "--seed", "8"]);
    (pop, dir.join("values.vtab.json"))
}

#[test]
fn gen_pop_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let args = ["gen-pop", "--count", "64", "--dist", "uniform:0.05,0.95", "--k", "4", "--seed", "7"];
    ok(a.path(), &args);
    ok(b.path(), &args);
    let text = read(a.path().join("population.pop.json"));
    assert_eq!(text, read(b.path().join("population.pop.json")));
    assert_eq!(json(a.path().join("population.pop.json")).as_array().unwrap().len(), 64);

    let manifest = json(a.path().join("manifest.json"));
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["artifacts"][0], "population.pop.json");
    assert!(manifest["command_line"].as_array().unwrap().iter().any(|a| a == "--count"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let out = basis(dir.path(), &["gen-pop", "--dist", "uniform:0.1,0.9"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let (pop, table) = fixture(dir.path(), "16");
    let (pop, table) = (pop.to_str().unwrap(), table.to_str().unwrap());
    let diag = |extra: &[&str]| {
        let mut args = vec!["diagnose", "--pop", pop, "--table", table];
        args.extend_from_slice(extra);
        basis(dir.path(), &args)
    };
    assert_eq!(code(&diag(&["--protocol", "group-sweep", "--repeats", "0"])), 2);
    assert_eq!(code(&diag(&["--protocol", "no-such-protocol"])), 2);
    assert_eq!(code(&basis(dir.path(), &["train", "--pop", pop, "--family", "basis", "--variant", "unb"])), 2);
}

#[test]
fn bad_descriptor_is_rejected() {
    let dir = TempDir::new().unwrap();
    for dist in ["uniform:0.9,0.1", "beta:-1,2", "gaussian:0,1", "two-cluster:0.2,0.8,1.5"] {
        let out = basis(dir.path(), &["gen-pop", "--count", "8", "--dist", dist]);
        assert_ne!(code(&out), 0, "{dist}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    }
    assert!(!dir.path().join("population.pop.json").exists());
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.pop.json");
    let out = basis(dir.path(), &["gen-values", "--pop", missing.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn gen_values_grid_and_rollouts() {
    let dir = TempDir::new().unwrap();
    let (pop, _) = fixture(dir.path(), "8");
    let table = json(dir.path().join("values.vtab.json"));
    let grid = table["grid"].as_array().unwrap();
    assert_eq!(grid.len(), 230);
    assert_eq!(grid[0].as_f64(), Some(0.01));
    assert_eq!(grid[229].as_f64(), Some(5.0));

    let one = TempDir::new().unwrap();
    ok(one.path(), &["gen-values", "--pop", pop.to_str().unwrap(), "--n", "1", "--grid", "0.5,1,2"]);
    let table = json(one.path().join("values.vtab.json"));
    assert_eq!(table["n"], 1);
    assert_eq!(table["grid"].as_array().unwrap().len(), 3);
    for e in table["entries"].as_array().unwrap() {
        let p = e["p_hat"].as_f64().unwrap();
        assert!(p == 0.0 || p == 1.0);
    }
}

#[test]
fn group_sweep_has_a_row_per_estimator() {
    let dir = TempDir::new().unwrap();
    let (pop, table) = fixture(dir.path(), "64");
    ok(
        dir.path(),
        &["diagnose", "--protocol", "group-sweep", "--pop", pop.to_str().unwrap(), "--table", table.to_str().unwrap(),
          "--B", "64", "--repeats", "10"],
    );
    let rows = csv_rows(dir.path().join("group-sweep.csv"));
    assert_eq!(rows[0].join(","), "estimator,variant,G,bin_lo,bin_hi,mse,collapse_freq,n");
    let keys: Vec<(String, String, String)> =
        rows[1..].iter().map(|r| (r[0].clone(), r[1].clone(), r[2].clone())).collect();
    for g in ["1", "2", "4", "8"] {
        assert!(keys.contains(&("grpo".into(), String::new(), g.into())));
    }
    for g in ["2", "4", "8"] {
        assert!(keys.contains(&("rloo".into(), String::new(), g.into())));
    }
    for v in ["unb", "vop", "rvg"] {
        assert!(keys.contains(&("basis".into(), v.into(), "1".into())));
    }
    assert!(keys.contains(&("zero".into(), String::new(), "1".into())));
    assert!(keys.contains(&("reinforcepp".into(), String::new(), "1".into())));
    assert!(dir.path().join("group-sweep.json").exists());
}

#[test]
fn heterogeneity_has_five_bins() {
    let dir = TempDir::new().unwrap();
    let (pop, table) = fixture(dir.path(), "64");
    ok(
        dir.path(),
        &["diagnose", "--protocol", "heterogeneity", "--pop", pop.to_str().unwrap(), "--table", table.to_str().unwrap(),
          "--batches", "500", "--B", "16"],
    );
    let rows = csv_rows(dir.path().join("heterogeneity.csv"));
    let grpo_bins = rows[1..].iter().filter(|r| r[0] == "grpo" && r[2] == "1").count();
    assert_eq!(grpo_bins, 5);
    let report = json(dir.path().join("heterogeneity.json"));
    assert_eq!(report["bin_edges"].as_array().unwrap().len(), 6);
    assert_eq!(report["scores"].as_array().unwrap().len(), 500);
}

#[test]
fn beta_curve_and_calibration_sweep() {
    let dir = TempDir::new().unwrap();
    let (pop, table) = fixture(dir.path(), "32");
    let (pop, table) = (pop.to_str().unwrap(), table.to_str().unwrap());
    ok(dir.path(), &["diagnose", "--protocol", "beta-curve", "--pop", pop, "--table", table, "--B", "16", "--repeats", "2"]);
    let rows = csv_rows(dir.path().join("beta-curve.csv"));
    assert_eq!(rows.len(), 231);

    ok(dir.path(), &["calibrate-sweep", "--pop", pop, "--table", table, "--B", "16", "--trials", "6", "--drift-beta", "0.5"]);
    let rows = csv_rows(dir.path().join("calibrate-sweep.csv"));
    assert_eq!(rows[0].join(","), "trial,beta,beta_index,objective,active_count,scored_prompts");
    assert_eq!(rows.len(), 7);
    let sweep = json(dir.path().join("calibrate-sweep.json"));
    assert_eq!(sweep["trials"].as_array().unwrap().len(), 6);
    let manifest = json(dir.path().join("manifest.json"));
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 2);
}

#[test]
fn train_writes_deterministic_traces() {
    let dir = TempDir::new().unwrap();
    let (pop, table) = fixture(dir.path(), "32");
    let (pop, table) = (pop.to_str().unwrap(), table.to_str().unwrap());
    let run = |sub: &str, extra: &[&str]| {
        let out = dir.path().join(sub);
        let mut args = vec!["train", "--pop", pop, "--seed", "3", "--B", "16"];
        args.extend_from_slice(extra);
        ok(&out, &args);
        read(out.join("trace.csv"))
    };

    let basis_trace = run("b1", &["--family", "basis", "--variant", "unb", "--table", table, "--steps", "200"]);
    assert_eq!(basis_trace, run("b2", &["--family", "basis", "--variant", "unb", "--table", table, "--steps", "200"]));
    let lines: Vec<&str> = basis_trace.lines().collect();
    assert_eq!(lines[0], "step,mean_true_value,selected_beta,grad_var");
    assert_eq!(lines.last().unwrap().split(',').next(), Some("200"));
    assert!(lines[1..].iter().skip(1).all(|l| !l.split(',').nth(2).unwrap().is_empty()));
    assert!(dir.path().join("b1/final.pop.json").exists());

    let zero = run("z", &["--family", "zero", "--steps", "20"]);
    assert!(zero.lines().skip(1).all(|l| l.split(',').nth(2) == Some("")));
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# population settings\ncount = 12\nseed = 5\ndist = beta:2,2\n").unwrap();
    let cfg = cfg.to_str().unwrap();

    let from_file = dir.path().join("file");
    ok(&from_file, &["--config", cfg, "gen-pop"]);
    assert_eq!(json(from_file.join("population.pop.json")).as_array().unwrap().len(), 12);
    let manifest = json(from_file.join("manifest.json"));
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["config_contents"].as_str().unwrap().contains("count = 12"));

    let flagged = dir.path().join("flag");
    ok(&flagged, &["--config", cfg, "gen-pop", "--count", "3"]);
    assert_eq!(json(flagged.join("population.pop.json")).as_array().unwrap().len(), 3);

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "count = lots\n").unwrap();
    assert_eq!(code(&basis(dir.path(), &["--config", bad.to_str().unwrap(), "gen-pop"])), 2);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = TempDir::new().unwrap();
    let (pop, table) = fixture(dir.path(), "32");
    let (pop, table) = (pop.to_str().unwrap(), table.to_str().unwrap());
    let mut outs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(threads);
        ok(&out, &["--threads", threads, "diagnose", "--protocol", "difficulty", "--pop", pop, "--table", table,
                   "--B", "16", "--repeats", "3"]);
        outs.push(read(out.join("difficulty.csv")));
    }
    assert_eq!(outs[0], outs[1]);
}
