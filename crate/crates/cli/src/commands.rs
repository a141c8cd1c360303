use std::path::{Path, PathBuf};

use illiquid_core::io::{self, IoError};
use illiquid_core::policy::PolicyTable;
use illiquid_core::simulator::tail_bound;
use illiquid_core::solver::{interp_linear, RESIDUAL_Z_RANGE};
use illiquid_core::{
    check_boundary_identity, check_supermartingale, extract_policy, hjb_residual, liquidity_cost, merton_multi,
    simulate_trace, simulate_truncated, solve_phi, stage_policies, value_at, BoundaryIdentityReport, CrraParams,
    Diagnostics, GridSolution, InitialState, MertonError, MertonSolution, PolicyError, ResidualStats, SimConfig,
    SimError, SolverError, SupermartingaleReport, ValidatedModel,
};
use serde::Serialize;
use thiserror::Error;

use crate::config::{self, ConfigError, Format, RunConfig, Sweep};

/// Random interior points for the HJB residual in `convergence.json`.
const RESIDUAL_SAMPLES: usize = 2000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Output(#[from] IoError),
    #[error("solver failed: {0}")]
    Solver(#[from] SolverError),
    #[error("Merton benchmark failed: {0}")]
    Merton(#[from] MertonError),
    #[error("policy extraction failed: {0}")]
    Policy(#[from] PolicyError),
    #[error("simulation rejected its inputs: {0}")]
    Simulation(#[from] SimError),
    #[error("Monte Carlo checks failed: {}", .0.join("; "))]
    Checks(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Output(_) | Self::Simulation(_) => 1,
            Self::Solver(_) | Self::Merton(_) | Self::Policy(_) => 2,
            Self::Checks(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Merton,
    Cost,
    Simulate,
    Validate,
}

/// Command-line settings that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub sweep: Option<PathBuf>,
    pub seed: Option<u64>,
    pub grid_points: Option<usize>,
}

fn resolve(config_path: &Path, o: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(out) = &o.out {
        cfg.output.directory = out.clone();
    }
    if let Some(seed) = o.seed {
        cfg.sim.seed = seed;
    }
    if let Some(n) = o.grid_points {
        cfg.grid.n_points = n;
    }
    if let Some(path) = &o.sweep {
        cfg.sweep = Some(config::read::<Sweep>(path)?);
    }
    Ok(cfg)
}

struct Writer<'a> {
    cfg: &'a RunConfig,
}

impl Writer<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output.directory.join(name)
    }

    fn csv(&self, name: &str, text: impl FnOnce() -> String) -> Result<(), IoError> {
        if self.cfg.output.wants(Format::Csv) {
            io::write_text(&self.path(name), &text())?;
        }
        Ok(())
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), IoError> {
        if self.cfg.output.wants(Format::Json) {
            io::write_json(&self.path(name), value)?;
        }
        Ok(())
    }
}

/// Runs one verb; every verb first writes `resolved_config.json`.
pub fn run(command: Command, config_path: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let cfg = resolve(config_path, overrides)?;
    let model = cfg.validate()?;
    let out = Writer { cfg: &cfg };
    io::write_json(&out.path("resolved_config.json"), &cfg)?;
    match command {
        Command::Validate => validate(&cfg, &model),
        Command::Solve => solve(&cfg, &model, &out).map(|_| ()),
        Command::Merton => merton(&model, &out).map(|_| ()),
        Command::Cost => cost(&cfg, &model, &out),
        Command::Simulate => simulate(&cfg, &model, &out),
    }
}

fn validate(cfg: &RunConfig, model: &ValidatedModel) -> Result<(), CliError> {
    let g = model.growth();
    println!(
        "config ok: {} regime(s), k(p) = {:.6} at z = {:.4}, rho = {}",
        cfg.model.d,
        g.k,
        g.z_star,
        model.prefs().rho
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct HistoryEntry {
    iter: usize,
    increment: f64,
}

#[derive(Debug, Serialize)]
struct ConvergenceReport {
    converged: bool,
    iter: usize,
    /// Last sup-norm increment.
    increment: f64,
    contraction_estimate: f64,
    min_increment: f64,
    n_points: usize,
    phi_max: Vec<f64>,
    pi_star: Vec<f64>,
    singular: Vec<f64>,
    hjb_residual: Option<ResidualStats>,
    hjb_residual_z_range: (f64, f64),
    history: Vec<HistoryEntry>,
}

fn convergence_report(sol: &GridSolution, residual: Option<ResidualStats>) -> ConvergenceReport {
    let d = sol.regimes();
    ConvergenceReport {
        converged: sol.converged,
        iter: sol.n_iter,
        increment: sol.history.last().copied().unwrap_or(f64::NAN),
        contraction_estimate: sol.contraction,
        min_increment: sol.min_increment,
        n_points: sol.z.len(),
        phi_max: (0..d).map(|i| sol.max_phi(i).1).collect(),
        pi_star: (0..d).map(|i| sol.z[sol.max_phi(i).0]).collect(),
        singular: sol.singular.clone(),
        hjb_residual: residual,
        hjb_residual_z_range: RESIDUAL_Z_RANGE,
        history: sol
            .history
            .iter()
            .enumerate()
            .map(|(k, &increment)| HistoryEntry { iter: k + 1, increment })
            .collect(),
    }
}

#[derive(Debug, Serialize)]
struct PolicyJson<'a> {
    pi_star: &'a [f64],
    p: f64,
    rho: f64,
}

/// Solves on the configured grid, writing the partial iterate as well when
/// the outer loop stalls.
fn solve_grid(cfg: &RunConfig, model: &ValidatedModel, out: &Writer) -> Result<GridSolution, CliError> {
    eprintln!("solving on {} nodes, lambda = {:?}", cfg.grid.n_points, cfg.model.lambda);
    match solve_phi(model, &cfg.grid) {
        Ok(sol) => Ok(sol),
        Err(SolverError::OuterNoConvergence {
            iterations,
            increment,
            partial,
        }) => {
            out.csv("phi.csv", || io::phi_csv(&partial))?;
            out.json("convergence.json", &convergence_report(&partial, None))?;
            Err(SolverError::OuterNoConvergence {
                iterations,
                increment,
                partial,
            }
            .into())
        }
        Err(e) => Err(e.into()),
    }
}

fn solve(cfg: &RunConfig, model: &ValidatedModel, out: &Writer) -> Result<(GridSolution, PolicyTable), CliError> {
    let sol = solve_grid(cfg, model, out)?;
    let policy = extract_policy(&sol, model.prefs())?;
    let residual = hjb_residual(&sol, model, RESIDUAL_SAMPLES, cfg.sim.seed);
    out.csv("phi.csv", || io::phi_csv(&sol))?;
    out.csv("policy.csv", || io::policy_csv(&policy))?;
    let prefs = model.prefs();
    out.json(
        "policy.json",
        &PolicyJson {
            pi_star: &policy.pi_star,
            p: prefs.p,
            rho: prefs.rho,
        },
    )?;
    out.json("convergence.json", &convergence_report(&sol, Some(residual)))?;
    println!(
        "converged in {} iterations (contraction {:.4}); max phi = {:?}, pi* = {:?}, max HJB residual {:.2e}",
        sol.n_iter,
        sol.contraction,
        (0..sol.regimes()).map(|i| sol.max_phi(i).1).collect::<Vec<_>>(),
        policy.pi_star,
        residual.max
    );
    Ok((sol, policy))
}

#[derive(Debug, Serialize)]
struct MertonJson<'a> {
    #[serde(flatten)]
    solution: &'a MertonSolution,
    prefs: CrraParams,
}

fn merton(model: &ValidatedModel, out: &Writer) -> Result<MertonSolution, CliError> {
    let bench = merton_multi(model)?;
    out.json(
        "merton.json",
        &MertonJson {
            solution: &bench,
            prefs: model.prefs(),
        },
    )?;
    println!("phi_M = {:?}, pi_M = {:?}, c_M = {:?}", bench.phi_m, bench.pi_m, bench.c_m);
    Ok(bench)
}

#[derive(Debug, Serialize)]
struct CostRow {
    lambda: Vec<f64>,
    cost: Vec<f64>,
    phi_max: Vec<f64>,
    pi_star: Vec<f64>,
    n_iter: usize,
}

#[derive(Debug, Serialize)]
struct CostJson {
    prefs: CrraParams,
    n_points: usize,
    phi_merton: Vec<f64>,
    pi_merton: Vec<f64>,
    rows: Vec<CostRow>,
}

fn cost(cfg: &RunConfig, model: &ValidatedModel, out: &Writer) -> Result<(), CliError> {
    let bench = merton_multi(model)?;
    let points: Vec<Vec<f64>> = match &cfg.sweep {
        Some(s) => s.lambda.iter().map(|p| p.expand(cfg.model.d)).collect(),
        None => vec![cfg.model.lambda.clone()],
    };
    let mut rows = Vec::new();
    for lambda in points {
        let run = cfg.with_lambda(lambda.clone());
        let m = run.validate()?;
        // artifacts of the individual solves are not kept
        let sol = solve_phi(&m, &run.grid)?;
        let rep = liquidity_cost(&sol, &bench, m.prefs());
        println!("lambda = {lambda:?}: P(1) = {:?}", rep.cost);
        rows.push(CostRow {
            lambda,
            cost: rep.cost,
            phi_max: rep.phi_max,
            pi_star: rep.pi_star,
            n_iter: sol.n_iter,
        });
    }
    out.json(
        "cost.json",
        &CostJson {
            prefs: model.prefs(),
            n_points: cfg.grid.n_points,
            phi_merton: bench.phi_m,
            pi_merton: bench.pi_m,
            rows,
        },
    )?;
    Ok(())
}

/// A Monte Carlo estimate set against its grid oracle.
#[derive(Debug, Serialize)]
struct Comparison {
    events: Option<usize>,
    estimate: f64,
    std_err: f64,
    oracle: f64,
    z_score: f64,
    pass: bool,
    n_paths: usize,
    tail_bound: f64,
    diagnostics: Diagnostics,
}

#[derive(Debug, Serialize)]
struct Checked<T> {
    #[serde(flatten)]
    report: T,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct SimJson {
    regime: usize,
    wealth: f64,
    z: f64,
    value: Comparison,
    truncated: Vec<Comparison>,
    boundary_identity: Checked<BoundaryIdentityReport>,
    supermartingale: Checked<SupermartingaleReport>,
    passed: bool,
}

fn simulate(cfg: &RunConfig, model: &ValidatedModel, out: &Writer) -> Result<(), CliError> {
    let checks = &cfg.checks;
    let mut needed: Vec<usize> = checks.truncated.clone();
    needed.extend(cfg.sim.truncate_after_events);
    let n_max = needed.iter().copied().max().unwrap_or(0);
    let mut run = cfg.clone();
    run.grid.record_iterates.extend(1..=n_max);
    run.grid.record_iterates.sort_unstable();
    run.grid.record_iterates.dedup();

    let (sol, policy) = solve(&run, model, out)?;
    let stages = stage_policies(&sol, model, n_max)?;
    let i = checks.regime - 1;
    let z = checks.z.unwrap_or(policy.pi_star[i]);
    let init = InitialState::new(i, checks.wealth, z);
    let utility = model.prefs().utility(checks.wealth);
    let tol = checks.z_tolerance;

    let compare = |events: Option<usize>| -> Result<Comparison, CliError> {
        let sim = SimConfig {
            truncate_after_events: events,
            ..cfg.sim.clone()
        };
        let (res, oracle) = match events {
            Some(n) => (
                simulate_truncated(model, &stages[..=n], init, &sim)?,
                utility * interp_linear(&sol.iterates[&n][i], z),
            ),
            None => (
                simulate_truncated(model, std::slice::from_ref(&policy), init, &sim)?,
                value_at(&sol, i, checks.wealth * (1.0 - z), checks.wealth * z),
            ),
        };
        // the horizon cut is only a bias for the untruncated value
        let tail = if events.is_none() { tail_bound(model, checks.wealth, sim.horizon) } else { 0.0 };
        let z_score = (res.estimate - oracle) / res.std_err;
        let pass = (res.estimate - oracle).abs() <= tol * res.std_err + tail && res.diagnostics.violations() == 0;
        eprintln!(
            "value (events {events:?}): {:.6} +- {:.6} vs {oracle:.6} (z = {z_score:.2})",
            res.estimate, res.std_err
        );
        Ok(Comparison {
            events,
            estimate: res.estimate,
            std_err: res.std_err,
            oracle,
            z_score,
            pass,
            n_paths: res.n_paths,
            tail_bound: res.tail_bound,
            diagnostics: res.diagnostics,
        })
    };

    let value = compare(cfg.sim.truncate_after_events)?;
    let truncated = checks
        .truncated
        .iter()
        .map(|&n| compare(Some(n)))
        .collect::<Result<Vec<_>, _>>()?;

    let boundary_cfg = SimConfig {
        n_paths: checks.boundary_paths,
        ..cfg.sim.clone()
    };
    let boundary = check_boundary_identity(model, &sol, i, checks.wealth, &boundary_cfg)?;
    let boundary_pass = boundary.z_score().abs() <= tol;
    eprintln!("boundary identity: z = {:.2}", boundary.z_score());

    let sm = check_supermartingale(model, &policy, init, &checks.supermartingale_times, &cfg.sim)?;
    let sm_pass = sm.nonincreasing && sm.diagnostics.violations() == 0;
    eprintln!("supermartingale: nonincreasing = {}", sm.nonincreasing);

    if checks.trace_paths > 0 {
        let rows = simulate_trace(model, &policy, init, &cfg.sim, checks.trace_paths, checks.trace_stride)?;
        out.csv("trace.csv", || io::trace_csv(&rows))?;
    }

    let mut failures = Vec::new();
    for c in std::iter::once(&value).chain(&truncated) {
        if !c.pass {
            failures.push(format!("value with events {:?} off by z = {:.2}", c.events, c.z_score));
        }
    }
    if !boundary_pass {
        failures.push(format!("boundary identity off by z = {:.2}", boundary.z_score()));
    }
    if !sm_pass {
        failures.push("discounted wealth moment increased".into());
    }
    let report = SimJson {
        regime: checks.regime,
        wealth: checks.wealth,
        z,
        value,
        truncated,
        boundary_identity: Checked {
            report: boundary,
            pass: boundary_pass,
        },
        supermartingale: Checked { report: sm, pass: sm_pass },
        passed: failures.is_empty(),
    };
    out.json("sim.json", &report)?;
    println!(
        "MC value {:.6} +- {:.6} vs grid {:.6}; {} check(s) failed",
        report.value.estimate,
        report.value.std_err,
        report.value.oracle,
        failures.len()
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Checks(failures))
    }
}

