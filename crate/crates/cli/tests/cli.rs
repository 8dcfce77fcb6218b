use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn zapsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zapsa")).args(args).env("ZAPSA_THREADS", "2").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = zapsa(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Data rows after the hash comment and the header.
fn rows(dir: &Path, name: &str) -> Vec<Vec<String>> {
    read(dir, name).lines().skip(2).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn column(dir: &Path, name: &str, col: &str) -> Vec<String> {
    let text = read(dir, name);
    let header: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == col).unwrap_or_else(|| panic!("{col} not in {name}"));
    rows(dir, name).into_iter().map(|r| r[k].clone()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solve_writes_eighteen_pairs_with_hash_line() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["solve", "--out", s(dir.path())]);
    let text = read(dir.path(), "q_star.csv");
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("# config_hash: ") && first.len() == "# config_hash: ".len() + 64);
    assert_eq!(text.lines().nth(1), Some("pair,state,action,cost,q_star"));
    assert_eq!(rows(dir.path(), "q_star.csv").len(), 18);
    assert_eq!(rows(dir.path(), "policy.csv").len(), 6);
    assert!(!text.contains('\r'));
}

#[test]
fn solve_without_discount_returns_the_cost() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["solve", "--beta", "0", "--out", s(dir.path())]);
    for r in rows(dir.path(), "q_star.csv") {
        assert_eq!(r[3].parse::<f64>().unwrap(), r[4].parse::<f64>().unwrap());
    }
}

#[test]
fn repeat_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&["solve", "--out", s(d.path())]);
        ok(&["run", "--steps", "3000", "--seed", "5", "--out", s(d.path())]);
    }
    for f in ["q_star.csv", "policy.csv", "trajectory.csv"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
}

#[test]
fn cov_sweep_marks_the_gain_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["cov", "--out", s(dir.path())]);
    assert!(stdout.contains("PF certificate"));
    let summary = rows(dir.path(), "cov_summary.csv");
    let g_star: f64 = summary.iter().find(|r| r[0] == "g_star").unwrap()[1].parse().unwrap();
    assert!((40.0..=50.0).contains(&g_star), "{g_star}");
    for r in rows(dir.path(), "sweep.csv") {
        let g: f64 = r[0].parse().unwrap();
        if g < g_star {
            assert_eq!((r[1].as_str(), r[2].as_str()), ("", "infinite"));
        } else if g > g_star * 1.001 {
            assert!(r[1].parse::<f64>().unwrap() > 0.0);
            assert_eq!(r[2], "finite");
        }
    }
    let pf: serde_json::Value = serde_json::from_str(&read(dir.path(), "pf.json")).unwrap();
    assert_eq!(pf["holds"], true);
}

#[test]
fn run_bellman_curve_matches_bench_trial_zero() {
    let run = tempfile::tempdir().unwrap();
    let bench = tempfile::tempdir().unwrap();
    let common = ["--steps", "5000", "--seed", "11", "--algo", "zap"];
    ok(&[&["run"][..], &common, &["--out", s(run.path())]].concat());
    ok(&[&["bench"][..], &common, &["--trials", "3", "--out", s(bench.path())]].concat());
    let from_run = column(run.path(), "trajectory.csv", "bellman_error");
    let from_bench: Vec<String> =
        rows(bench.path(), "bellman_trials.csv").into_iter().filter(|r| r[0] == "0").map(|r| r[2].clone()).collect();
    assert_eq!(from_run.len(), 3);
    assert_eq!(from_run, from_bench);
}

#[test]
fn bench_smoke_run_reports_theory_next_to_empirical() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    ok(&["bench", "--trials", "2", "--steps", "1000", "--seed", "42", "--out", s(dir.path())]);
    assert!(t.elapsed().as_secs_f64() < 5.0);
    let cov = tempfile::tempdir().unwrap();
    ok(&["cov", "--out", s(cov.path())]);
    let star = rows(cov.path(), "cov_summary.csv").into_iter().find(|r| r[0] == "trace_sigma_star").unwrap()[1].clone();
    for t in column(dir.path(), "cov_table.csv", "trace_theory") {
        assert_eq!(t, star);
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path(), "manifest.json")).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["command"], "bench");
    assert!(manifest["files"].as_array().unwrap().iter().any(|f| f == "hist_w00.csv"));
}

#[test]
fn manifest_replay_reproduces_every_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&["bench", "--trials", "3", "--steps", "2000", "--seed", "3", "--algo", "watkins_scaled", "--out", s(a.path())]);
    let manifest = a.path().join("manifest.json");
    ok(&["bench", "--config", s(&manifest), "--out", s(b.path())]);
    let files: serde_json::Value = serde_json::from_str(&read(a.path(), "manifest.json")).unwrap();
    for f in files["files"].as_array().unwrap() {
        let f = f.as_str().unwrap();
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
}

#[test]
fn flags_beat_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"steps": 2000, "seed": 1, "gain": 10}"#).unwrap();
    ok(&["run", "--config", s(&cfg), "--seed", "2", "--algo", "watkins_scaled", "--out", s(dir.path())]);
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path(), "manifest.json")).unwrap();
    let c = &manifest["config"];
    assert_eq!((c["steps"].as_u64(), c["seed"].as_u64(), c["gain"].as_f64()), (Some(2000), Some(2), Some(10.0)));
    assert_eq!(c["algorithm"], "watkins_scaled");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(zapsa(&["run", "--algo", "bogus"]).status.code(), Some(2));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"stpes": 10}"#).unwrap();
    assert_eq!(zapsa(&["run", "--config", s(&cfg)]).status.code(), Some(2));
    assert_eq!(zapsa(&["solve", "--beta", "1.5", "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(zapsa(&["run", "--algo", "q0", "--out", s(dir.path())]).status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // Two identical actions: the optimal policy is not unique, so there is no linearization.
    let model = dir.path().join("tie.json");
    std::fs::write(
        &model,
        r#"{"n_states": 1, "beta": 0.5, "pairs": [
            {"state": 0, "action": 0, "reward": 1.0, "next": [1.0]},
            {"state": 0, "action": 1, "reward": 1.0, "next": [1.0]}]}"#,
    )
    .unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, format!(r#"{{"env": {{"kind": "file", "path": {:?}}}}}"#, s(&model))).unwrap();
    ok(&["solve", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(zapsa(&["cov", "--config", s(&cfg), "--out", s(dir.path())]).status.code(), Some(3));
}

#[test]
fn stopping_bench_writes_outlier_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"env": {"kind": "stopping"}, "algorithm": "zap_stopping", "steps": 5000, "trials": 3, "mc_paths": 20, "mc_horizon": 500}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    ok(&["bench", "--config", s(&cfg), "--out", s(&out)]);
    let table = rows(&out, "outliers.csv");
    assert_eq!(table.len(), 4);
    let fractions: Vec<f64> = table.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(fractions.windows(2).all(|w| w[0] >= w[1]), "{fractions:?}");
    assert_eq!(rows(&out, "values.csv").len(), 3);
    ok(&["cov", "--config", s(&cfg), "--out", s(&out)]);
    ok(&["run", "--config", s(&cfg), "--algo", "gq0", "--out", s(&out)]);
}

#[test]
fn td_and_lstd_approach_the_policy_value() {
    let dir = tempfile::tempdir().unwrap();
    for algo in ["td", "lstd"] {
        ok(&["run", "--algo", algo, "--steps", "100000", "--gain", "20", "--out", s(dir.path())]);
        let err: Vec<f64> = column(dir.path(), "trajectory.csv", "value_error").iter().map(|x| x.parse().unwrap()).collect();
        assert!(err.last().unwrap() < &err[0], "{algo}: {err:?}");
    }
}
