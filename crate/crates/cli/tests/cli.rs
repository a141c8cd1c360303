use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SINGLE: &str = r#"
[model]
d = 1
b = [0.4]
sigma = [1.0]
lambda = [1.0]
q = [[0.0]]
gamma = [[0.0]]

[prefs]
p = 0.5
rho = 0.2
"#;

const TWO: &str = r#"
[model]
d = 2
b = [0.4, 0.4]
sigma = [1.0, 2.0]
lambda = [1.0, 1.0]
q = [[-1.0, 1.0], [1.0, -1.0]]
gamma = [[0.0, 0.0], [0.0, 0.0]]

[prefs]
p = 0.5
rho = 0.2
"#;

/// Small Monte Carlo settings so a simulate run takes about a second.
const QUICK_SIM: &str = r#"
[grid]
n_points = 401

[sim]
n_paths = 2000
horizon = 20.0
dt = 1e-2
seed = 11

[checks]
truncated = [1, 3]
supermartingale_times = [0.0, 1.0, 2.0]
boundary_paths = 4000
trace_paths = 3
trace_stride = 50
"#;

fn illiquid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_illiquid")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(verb: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![verb, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    illiquid(&args)
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn solve_writes_converged_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", SINGLE);
    let out = dir.path().join("out");
    let o = run("solve", &cfg, &out, &["--grid-points", "401"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let conv = json(out.join("convergence.json"));
    assert_eq!(conv["converged"], Value::Bool(true));
    let history = conv["history"].as_array().unwrap();
    assert_eq!(history.len() as u64, conv["iter"].as_u64().unwrap());
    assert_eq!(history[0]["iter"].as_u64(), Some(1));
    assert!(conv["contraction_estimate"].as_f64().unwrap() < 1.0);
    assert!(conv["hjb_residual"]["max"].as_f64().unwrap() < 1e-2);
    let phi = fs::read_to_string(out.join("phi.csv")).unwrap();
    let lines: Vec<&str> = phi.lines().collect();
    assert_eq!(lines[0], "z,phi_1");
    assert_eq!(lines.len(), 402);
    let policy = json(out.join("policy.json"));
    assert_eq!(policy["p"].as_f64(), Some(0.5));
    assert_eq!(policy["pi_star"].as_array().unwrap().len(), 1);
    assert!(out.join("policy.csv").exists());
}

#[test]
fn two_regimes_give_one_column_each() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", TWO);
    let out = dir.path().join("out");
    let o = run("solve", &cfg, &out, &["--grid-points", "201"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let phi = fs::read_to_string(out.join("phi.csv")).unwrap();
    assert_eq!(phi.lines().next(), Some("z,phi_1,phi_2"));
    assert!(phi.lines().skip(1).all(|l| l.split(',').count() == 3));
}

#[test]
fn malformed_gamma_exits_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write(dir.path(), "bad.toml", &TWO.replace("[[0.0, 0.0], [0.0, 0.0]]", "[[0.0, 1.5], [0.0, 0.0]]"));
    let o = run("solve", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.gamma[0][1]"), "{}", stderr(&o));

    let cfg = write(dir.path(), "typo.toml", &TWO.replace("[[0.0, 0.0], [0.0, 0.0]]", "[[0.0, \"x\"], [0.0, 0.0]]"));
    let o = run("validate", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.gamma[0][1]"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_config_code() {
    assert_eq!(illiquid(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(illiquid(&["solve"]).status.code(), Some(1));
    assert_eq!(illiquid(&["solve", "--config", "/does/not/exist.toml"]).status.code(), Some(1));
    assert_eq!(illiquid(&["--help"]).status.code(), Some(0));
}

#[test]
fn stalled_solver_exits_with_solver_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", &format!("{SINGLE}\n[grid]\nn_points = 201\nmax_outer = 3\n"));
    let out = dir.path().join("out");
    let o = run("solve", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(json(out.join("convergence.json"))["converged"], Value::Bool(false));
}

#[test]
fn cost_sweep_reproduces_the_single_regime_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", SINGLE);
    let sweep = write(dir.path(), "sweep.toml", "lambda = [1.0, 5.0, 40.0]\n");
    let out = dir.path().join("out");
    let o = run("cost", &cfg, &out, &["--sweep", sweep.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cost = json(out.join("cost.json"));
    let rows = cost["rows"].as_array().unwrap();
    let got: Vec<f64> = rows.iter().map(|r| r["cost"][0].as_f64().unwrap()).collect();
    for (g, (want, tol)) in got.iter().zip([(0.153, 0.005), (0.016, 0.005), (0.001, 0.002)]) {
        assert!((g - want).abs() <= tol, "{got:?}");
    }
    assert!((cost["phi_merton"][0].as_f64().unwrap() - 2.041241).abs() < 1e-6);
}

#[test]
fn merton_writes_the_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", TWO);
    let out = dir.path().join("out");
    assert_eq!(run("merton", &cfg, &out, &[]).status.code(), Some(0));
    let m = json(out.join("merton.json"));
    assert!(m["residual"].as_f64().unwrap() < 1e-10);
    assert!((m["phi_m"][0].as_f64().unwrap() - 1.852135).abs() < 1e-6);
}

#[test]
fn resolved_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", &format!("{TWO}{QUICK_SIM}\n[sweep]\nlambda = [1, [2.0, 3.0]]\n"));
    let first = dir.path().join("first");
    let o = run("validate", &cfg, &first, &["--seed", "5", "--grid-points", "301"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resolved = first.join("resolved_config.json");
    let text = fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("\"seed\": 5") && text.contains("\"n_points\": 301"));
    // re-running from the resolved file reproduces it byte for byte
    let o = illiquid(&["validate", "--config", resolved.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&resolved).unwrap(), text);
}

#[test]
fn simulate_is_deterministic_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", &format!("{SINGLE}{QUICK_SIM}"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run("simulate", &cfg, &a, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(run("simulate", &cfg, &b, &[]).status.code(), Some(0));
    let sa = fs::read(a.join("sim.json")).unwrap();
    assert_eq!(sa, fs::read(b.join("sim.json")).unwrap());
    let sim: Value = serde_json::from_slice(&sa).unwrap();
    assert_eq!(sim["passed"], Value::Bool(true));
    assert_eq!(sim["truncated"].as_array().unwrap().len(), 2);
    assert_eq!(sim["supermartingale"]["pass"], Value::Bool(true));
    let trace = fs::read_to_string(a.join("trace.csv")).unwrap();
    assert!(trace.starts_with("path,t,i,r,z,disc_util\n"));

    let c = run("simulate", &cfg, &dir.path().join("c"), &["--seed", "12"]);
    assert_eq!(c.status.code(), Some(0), "{}", stderr(&c));
    assert_ne!(sa, fs::read(dir.path().join("c/sim.json")).unwrap());
}

#[test]
fn truncated_run_matches_its_iterate() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SINGLE}{QUICK_SIM}").replace("seed = 11", "seed = 11\ntruncate_after_events = 3");
    let cfg = write(dir.path(), "run.toml", &text);
    let out = dir.path().join("out");
    let o = run("simulate", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sim = json(out.join("sim.json"));
    assert_eq!(sim["value"]["events"].as_u64(), Some(3));
    assert!(sim["value"]["z_score"].as_f64().unwrap().abs() <= 3.0);
}

#[test]
fn failed_checks_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    // no estimate can be this close to its oracle
    let text = format!("{SINGLE}{QUICK_SIM}").replace("trace_paths = 3", "trace_paths = 0\nz_tolerance = 1e-9");
    let cfg = write(dir.path(), "run.toml", &text);
    let out = dir.path().join("out");
    let o = run("simulate", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert_eq!(json(out.join("sim.json"))["passed"], Value::Bool(false));
}
