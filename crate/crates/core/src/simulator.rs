//! Event-driven Monte Carlo of the controlled wealth process.
//!
//! Regime switches and trading times are drawn exactly as competing
//! exponential clocks (all rates are constant between events). Between
//! events the stock holding takes Euler-Maruyama steps of length `dt` and
//! the cash account is depleted by the feedback consumption `c*(I, Z) R`,
//! frozen over each step. Consumption is taken multiplicatively from the cash
//! account, so it never goes negative; a stock step that would is counted and
//! its path rejected. Utility is accrued by left-point quadrature on the same
//! steps.
//!
//! Each path owns a ChaCha stream selected by its index, and path results are
//! reduced in a fixed pairwise order, so a run is bitwise reproducible
//! whatever the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CrraParams, ValidatedModel};
use crate::policy::{value_at, PolicyTable};
use crate::solver::GridSolution;

/// Relative slack for the jump bookkeeping and no-short-sale checks.
const STATE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("invalid initial state: {0}")]
    InvalidInitialState(String),
    #[error("policy has {got} regimes, the model {expected}")]
    RegimeMismatch { expected: usize, got: usize },
    #[error("event rate {rate} of regime {regime} cannot drive an exponential clock")]
    ClockOverflow { regime: usize, rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_paths: usize,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    /// Stop accruing utility at the `n`-th event (regime switch or trading time).
    pub truncate_after_events: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            horizon: 60.0,
            dt: 1e-3,
            seed: 0,
            truncate_after_events: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_paths == 0 {
            return Err(SimError::InvalidConfig("n_paths must be at least 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SimError::InvalidConfig(format!("horizon {} must be positive", self.horizon)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidConfig(format!("dt {} must be positive", self.dt)));
        }
        Ok(())
    }
}

/// Starting regime, wealth `r = x + y` and stock proportion `z = y / r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub regime: usize,
    pub wealth: f64,
    pub z: f64,
}

impl InitialState {
    pub fn new(regime: usize, wealth: f64, z: f64) -> Self {
        Self { regime, wealth, z }
    }

    fn check(&self, d: usize) -> Result<(), SimError> {
        if self.regime >= d {
            return Err(SimError::InvalidInitialState(format!(
                "regime {} out of range for {d} regimes",
                self.regime
            )));
        }
        if !(self.wealth >= 0.0 && self.wealth.is_finite()) {
            return Err(SimError::InvalidInitialState(format!("wealth {} must be nonnegative", self.wealth)));
        }
        if !(0.0..=1.0).contains(&self.z) {
            return Err(SimError::InvalidInitialState(format!("proportion {} must lie in [0,1]", self.z)));
        }
        Ok(())
    }
}

/// Invariant-violation counters; all zero for a correct run except the event
/// tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub switches: u64,
    pub trades: u64,
    /// Proportions outside `[0,1]` clamped before a policy lookup.
    pub clamped_z: u64,
    /// Holdings below `-1e-12 R`.
    pub short_sale: u64,
    /// Paths whose wealth reached zero before the horizon from a positive start.
    pub zero_wealth: u64,
    /// Regime switches whose `(R, Z)` update disagrees with `Y+ = Y-(1-gamma)`.
    pub jump_mismatch: u64,
    /// Paths dropped because wealth became negative or non-finite.
    pub rejected_paths: u64,
}

impl Diagnostics {
    fn merge(mut self, o: &Diagnostics) -> Self {
        self.switches += o.switches;
        self.trades += o.trades;
        self.clamped_z += o.clamped_z;
        self.short_sale += o.short_sale;
        self.zero_wealth += o.zero_wealth;
        self.jump_mismatch += o.jump_mismatch;
        self.rejected_paths += o.rejected_paths;
        self
    }

    /// Whether any invariant counter is nonzero.
    pub fn violations(&self) -> u64 {
        self.clamped_z + self.short_sale + self.zero_wealth + self.jump_mismatch + self.rejected_paths
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// Mean discounted utility `E[int_0^T e^{-rho t} U(c_t) dt]`.
    pub estimate: f64,
    pub std_err: f64,
    pub n_paths: usize,
    /// Bound on the utility discarded beyond the horizon; not added to the estimate.
    pub tail_bound: f64,
    pub diagnostics: Diagnostics,
}

/// One row of a debugging trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub path: usize,
    pub t: f64,
    pub i: usize,
    pub r: f64,
    pub z: f64,
    pub disc_util: f64,
}

/// Most paths a trace may cover.
pub const MAX_TRACE_PATHS: usize = 100;

/// Sum in a fixed binary-tree order, independent of how the inputs were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Mean and standard error of the mean.
pub fn mean_and_std_err(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `C e^{-(rho - k) T} r^p` with the growth constant
/// `C = ((1-p) p^{-1/(1-p)} / (rho - k))^{1-p}`.
pub fn tail_bound(model: &ValidatedModel, wealth: f64, horizon: f64) -> f64 {
    let prefs = model.prefs();
    let (p, gap) = (prefs.p, prefs.rho - model.growth().k);
    let c = ((1.0 - p) * p.powf(-1.0 / (1.0 - p)) / gap).powf(1.0 - p);
    c * (-gap * horizon).exp() * wealth.powf(p)
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

fn exp_clock(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

#[inline]
fn pow_p(x: f64, p: f64) -> f64 {
    if p == 0.5 {
        x.sqrt()
    } else {
        x.powf(p)
    }
}

/// `e^{-a}` for `a >= 0`; consumption removes a tiny fraction of cash per
/// step, where a short series is exact to rounding and much cheaper.
#[inline]
fn decay(a: f64) -> f64 {
    if a < 1e-3 {
        1.0 - a * (1.0 - 0.5 * a * (1.0 - a / 3.0 * (1.0 - 0.25 * a)))
    } else {
        (-a).exp()
    }
}

struct PathOutcome {
    util: f64,
    /// `e^{-k t} R_t^p` at the requested observation times.
    marks: Vec<f64>,
    diag: Diagnostics,
}

/// Everything a path needs besides its random stream.
struct PathSpec<'a> {
    model: &'a ValidatedModel,
    prefs: CrraParams,
    /// `stages[m]` is used while `m` events remain; a single entry is used throughout.
    stages: &'a [PolicyTable],
    truncate: Option<usize>,
    horizon: f64,
    dt: f64,
    checkpoints: &'a [f64],
    growth_k: f64,
}

impl PathSpec<'_> {
    fn stage(&self, remaining: Option<usize>) -> &PolicyTable {
        match remaining {
            Some(m) => &self.stages[m.min(self.stages.len() - 1)],
            None => &self.stages[0],
        }
    }
}

/// Paths advanced together so their independent dependency chains overlap;
/// each path still sees exactly its own arithmetic and random stream.
const LANES: usize = 8;

/// One path as a state machine: [`Walker::step`] performs either one time
/// step or the bookkeeping at a checkpoint, event or the horizon.
struct Walker<'s, 'a> {
    spec: &'s PathSpec<'a>,
    rng: ChaCha8Rng,
    stage: &'s PolicyTable,
    i: usize,
    x: f64,
    y: f64,
    t: f64,
    util: f64,
    disc: f64,
    disc_dt: f64,
    t_event: f64,
    stop: f64,
    rate: f64,
    b: f64,
    s: f64,
    drift_dt: f64,
    vol_dt: f64,
    remaining: Option<usize>,
    next_mark: usize,
    marks: Vec<f64>,
    diag: Diagnostics,
    steps: usize,
    positive_start: bool,
    done: bool,
    trace: Option<(usize, usize, Vec<TraceRow>)>,
}

impl<'s, 'a> Walker<'s, 'a> {
    fn new(spec: &'s PathSpec<'a>, rng: ChaCha8Rng, init: InitialState, trace: Option<(usize, usize)>) -> Self {
        let mut w = Walker {
            spec,
            rng,
            stage: spec.stage(spec.truncate),
            i: init.regime,
            x: init.wealth * (1.0 - init.z),
            y: init.wealth * init.z,
            t: 0.0,
            util: 0.0,
            disc: 1.0,
            disc_dt: (-spec.prefs.rho * spec.dt).exp(),
            t_event: 0.0,
            stop: 0.0,
            rate: 0.0,
            b: 0.0,
            s: 0.0,
            drift_dt: 0.0,
            vol_dt: 0.0,
            remaining: spec.truncate,
            next_mark: 0,
            marks: Vec::with_capacity(spec.checkpoints.len()),
            diag: Diagnostics::default(),
            steps: 0,
            positive_start: init.wealth > 0.0,
            done: false,
            trace: trace.map(|(path, stride)| (path, stride.max(1), Vec::new())),
        };
        w.record(true);
        if w.remaining == Some(0) {
            w.finish();
        } else {
            w.begin_segment();
        }
        w
    }

    fn record(&mut self, force: bool) {
        if let Some((path, stride, rows)) = self.trace.as_mut() {
            if force || self.steps % *stride == 0 {
                let r = self.x + self.y;
                rows.push(TraceRow {
                    path: *path,
                    t: self.t,
                    i: self.i,
                    r,
                    z: if r > 0.0 { self.y / r } else { 0.0 },
                    disc_util: self.util,
                });
            }
        }
    }

    fn mark(&mut self, r: f64) {
        let tk = self.spec.checkpoints[self.next_mark];
        self.marks.push((-self.spec.growth_k * tk).exp() * pow_p(r, self.spec.prefs.p));
        self.next_mark += 1;
    }

    /// Draws the next event time in the current regime.
    fn begin_segment(&mut self) {
        let model = self.spec.model;
        self.rate = model.event_rate(self.i);
        self.t_event = self.t + exp_clock(&mut self.rng, self.rate);
        self.b = model.b(self.i);
        self.s = model.sigma(self.i);
        self.drift_dt = self.b * self.spec.dt;
        self.vol_dt = self.s * self.spec.dt.sqrt();
        self.stage = self.spec.stage(self.remaining);
        self.disc = (-self.spec.prefs.rho * self.t).exp();
        self.update_stop();
    }

    /// Records due checkpoints and sets the end of the current stretch of
    /// continuous evolution.
    fn update_stop(&mut self) {
        let cps = self.spec.checkpoints;
        while self.next_mark < cps.len() && cps[self.next_mark] <= self.t {
            self.mark(self.x + self.y);
        }
        self.stop = self.t_event.min(self.spec.horizon);
        if self.next_mark < cps.len() {
            self.stop = self.stop.min(cps[self.next_mark]);
        }
    }

    #[inline(always)]
    fn step(&mut self) {
        if self.t >= self.stop {
            self.boundary();
            return;
        }
        let spec = self.spec;
        let p = spec.prefs.p;
        let last = self.stop - self.t <= spec.dt;
        let h = if last { self.stop - self.t } else { spec.dt };
        let r = self.x + self.y;
        let z = if r > 0.0 { self.y / r } else { 0.0 };
        let spend = self.stage.consumption(self.i, z) * r;
        if spend > 0.0 {
            self.util += self.disc * pow_p(spend, p) / p * h;
        }
        let n: f64 = self.rng.sample(StandardNormal);
        let growth = if last {
            1.0 + self.b * h + self.s * h.sqrt() * n
        } else {
            1.0 + self.drift_dt + self.vol_dt * n
        };
        if growth <= 0.0 {
            self.diag.rejected_paths += 1;
            self.finish();
            return;
        }
        self.y *= growth;
        if self.x > 0.0 && spend > 0.0 {
            self.x *= decay(spend * h / self.x);
        }
        // land exactly on the stop so event times stay exact
        if last {
            self.t = self.stop;
            self.disc = (-spec.prefs.rho * self.t).exp();
        } else {
            self.t += h;
            self.disc *= self.disc_dt;
        }
        self.steps += 1;
        if !(self.x >= 0.0 && self.y >= 0.0 && (self.x + self.y).is_finite()) {
            self.diag.rejected_paths += 1;
            self.finish();
            return;
        }
        if self.trace.is_some() {
            self.record(false);
        }
    }

    /// Checkpoint, horizon or event at `t == stop`.
    fn boundary(&mut self) {
        self.update_stop();
        if self.t < self.stop {
            return;
        }
        if self.t >= self.spec.horizon {
            self.finish();
            return;
        }
        if let Some(m) = self.remaining.as_mut() {
            *m -= 1;
        }
        if self.remaining == Some(0) {
            self.finish();
            return;
        }
        let model = self.spec.model;
        let i = self.i;
        let lambda = model.lambda(i);
        let mut u = self.rng.random::<f64>() * self.rate;
        if u < lambda {
            self.diag.trades += 1;
            let target = self.spec.stage(self.remaining).pi_star[i];
            let r = self.x + self.y;
            self.x = r * (1.0 - target);
            self.y = r * target;
        } else {
            u -= lambda;
            let d = model.regimes();
            let mut j = (0..d).filter(|&j| j != i).last().unwrap_or(i);
            for k in (0..d).filter(|&k| k != i) {
                let q = model.q(i, k);
                if u < q {
                    j = k;
                    break;
                }
                u -= q;
            }
            self.diag.switches += 1;
            let g = model.gamma(i, j);
            let (x, y) = (self.x, self.y);
            let (r0, z0) = (x + y, if x + y > 0.0 { y / (x + y) } else { 0.0 });
            let y_new = y * (1.0 - g);
            let r_rule = r0 * (1.0 - g * z0);
            let z_rule = if g * z0 < 1.0 { z0 * (1.0 - g) / (1.0 - g * z0) } else { 0.0 };
            let r_new = x + y_new;
            if (r_new - r_rule).abs() > STATE_TOL * r0.max(1.0)
                || (r_new > 0.0 && (y_new / r_new - z_rule).abs() > STATE_TOL)
            {
                self.diag.jump_mismatch += 1;
            }
            self.y = y_new;
            self.i = j;
        }
        self.record(true);
        self.begin_segment();
    }

    fn finish(&mut self) {
        let r = self.x + self.y;
        if self.x < -STATE_TOL * r || self.y < -STATE_TOL * r {
            self.diag.short_sale += 1;
        }
        if self.positive_start && r <= 0.0 && self.diag.rejected_paths == 0 {
            self.diag.zero_wealth += 1;
        }
        // a path stopped early keeps its wealth frozen for later checkpoints
        while self.next_mark < self.spec.checkpoints.len() {
            self.mark(r);
        }
        self.done = true;
    }

    fn outcome(self) -> PathOutcome {
        PathOutcome {
            util: self.util,
            marks: self.marks,
            diag: self.diag,
        }
    }
}

fn check_inputs(
    model: &ValidatedModel,
    stages: &[PolicyTable],
    init: InitialState,
    cfg: &SimConfig,
) -> Result<(), SimError> {
    cfg.validate()?;
    let d = model.regimes();
    init.check(d)?;
    for st in stages {
        if st.regimes() != d {
            return Err(SimError::RegimeMismatch {
                expected: d,
                got: st.regimes(),
            });
        }
    }
    for i in 0..d {
        let rate = model.event_rate(i);
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(SimError::ClockOverflow { regime: i, rate });
        }
    }
    Ok(())
}

fn run_all(spec: &PathSpec<'_>, init: InitialState, cfg: &SimConfig) -> Vec<PathOutcome> {
    let chunks: Vec<usize> = (0..cfg.n_paths).step_by(LANES).collect();
    chunks
        .into_par_iter()
        .flat_map_iter(|start| {
            let end = (start + LANES).min(cfg.n_paths);
            let mut lanes: Vec<Walker> = (start..end)
                .map(|k| Walker::new(spec, path_rng(cfg.seed, k), init, None))
                .collect();
            loop {
                let mut active = false;
                for w in lanes.iter_mut().filter(|w| !w.done) {
                    w.step();
                    active = true;
                }
                if !active {
                    break;
                }
            }
            lanes.into_iter().map(Walker::outcome)
        })
        .collect()
}

fn summarise(outcomes: &[PathOutcome], model: &ValidatedModel, init: InitialState, cfg: &SimConfig) -> SimResult {
    let diagnostics = outcomes
        .iter()
        .fold(Diagnostics::default(), |acc, o| acc.merge(&o.diag));
    let kept: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.diag.rejected_paths == 0)
        .map(|o| o.util)
        .collect();
    let (estimate, std_err) = if kept.is_empty() { (f64::NAN, f64::NAN) } else { mean_and_std_err(&kept) };
    SimResult {
        estimate,
        std_err,
        n_paths: kept.len(),
        tail_bound: tail_bound(model, init.wealth, cfg.horizon),
        diagnostics,
    }
}

/// Expected discounted utility of following `policy` from `init` up to the
/// horizon (or the configured event count).
pub fn simulate_value(
    model: &ValidatedModel,
    policy: &PolicyTable,
    init: InitialState,
    cfg: &SimConfig,
) -> Result<SimResult, SimError> {
    simulate_truncated(model, std::slice::from_ref(policy), init, cfg)
}

/// As [`simulate_value`], with one policy per remaining event count:
/// `stages[m]` is followed while `m` events remain before consumption stops
/// (see [`crate::policy::stage_policies`]). A single stage is used throughout.
pub fn simulate_truncated(
    model: &ValidatedModel,
    stages: &[PolicyTable],
    init: InitialState,
    cfg: &SimConfig,
) -> Result<SimResult, SimError> {
    if stages.is_empty() {
        return Err(SimError::InvalidConfig("at least one policy is required".into()));
    }
    check_inputs(model, stages, init, cfg)?;
    let spec = PathSpec {
        model,
        prefs: model.prefs(),
        stages,
        truncate: cfg.truncate_after_events,
        horizon: cfg.horizon,
        dt: cfg.dt,
        checkpoints: &[],
        growth_k: model.growth().k,
    };
    Ok(summarise(&run_all(&spec, init, cfg), model, init, cfg))
}

/// Per-step trace of the first `paths` paths (at most [`MAX_TRACE_PATHS`]),
/// keeping every `stride`-th step plus every event.
pub fn simulate_trace(
    model: &ValidatedModel,
    policy: &PolicyTable,
    init: InitialState,
    cfg: &SimConfig,
    paths: usize,
    stride: usize,
) -> Result<Vec<TraceRow>, SimError> {
    check_inputs(model, std::slice::from_ref(policy), init, cfg)?;
    let spec = PathSpec {
        model,
        prefs: model.prefs(),
        stages: std::slice::from_ref(policy),
        truncate: cfg.truncate_after_events,
        horizon: cfg.horizon,
        dt: cfg.dt,
        checkpoints: &[],
        growth_k: model.growth().k,
    };
    let mut rows = Vec::new();
    for k in 0..paths.min(MAX_TRACE_PATHS).min(cfg.n_paths) {
        let mut w = Walker::new(&spec, path_rng(cfg.seed, k), init, Some((k, stride)));
        while !w.done {
            w.step();
        }
        rows.extend(w.trace.take().map(|t| t.2).unwrap_or_default());
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryIdentityReport {
    pub regime: usize,
    pub y: f64,
    /// `v_i(0, y)` from the grid.
    pub grid_value: f64,
    /// Monte Carlo estimate of `E[e^{-rho tau_1} v̂_{I_tau_1}(Y_tau_1)]`.
    pub estimate: f64,
    pub std_err: f64,
    pub n_paths: usize,
}

impl BoundaryIdentityReport {
    pub fn z_score(&self) -> f64 {
        (self.estimate - self.grid_value) / self.std_err
    }
}

/// Checks `v_i(0, y) = E[e^{-rho tau_1} v̂_{I_{tau_1}}(Y_{tau_1})]`: with no cash
/// nothing can be consumed before the first trading time `tau_1`. The stock
/// holding is simulated exactly, so `dt` and the horizon are not used.
pub fn check_boundary_identity(
    model: &ValidatedModel,
    sol: &GridSolution,
    regime: usize,
    y: f64,
    cfg: &SimConfig,
) -> Result<BoundaryIdentityReport, SimError> {
    cfg.validate()?;
    InitialState::new(regime, y, 1.0).check(model.regimes())?;
    let prefs = model.prefs();
    let tops: Vec<f64> = (0..model.regimes()).map(|i| sol.max_phi(i).1).collect();
    let samples: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|k| {
            let mut rng = path_rng(cfg.seed, k);
            let (mut i, mut t, mut y) = (regime, 0.0, y);
            loop {
                let rate = model.event_rate(i);
                let tau = exp_clock(&mut rng, rate);
                let s = model.sigma(i);
                let n: f64 = rng.sample(StandardNormal);
                y *= ((model.b(i) - 0.5 * s * s) * tau + s * tau.sqrt() * n).exp();
                t += tau;
                let mut u = rng.random::<f64>() * rate;
                let lambda = model.lambda(i);
                if u < lambda {
                    return (-prefs.rho * t).exp() * prefs.utility(y) * tops[i];
                }
                u -= lambda;
                let d = model.regimes();
                let mut j = (0..d).filter(|&j| j != i).last().unwrap_or(i);
                for k in (0..d).filter(|&k| k != i) {
                    if u < model.q(i, k) {
                        j = k;
                        break;
                    }
                    u -= model.q(i, k);
                }
                y *= 1.0 - model.gamma(i, j);
                i = j;
            }
        })
        .collect();
    let (estimate, std_err) = mean_and_std_err(&samples);
    Ok(BoundaryIdentityReport {
        regime,
        y,
        grid_value: value_at(sol, regime, 0.0, y),
        estimate,
        std_err,
        n_paths: cfg.n_paths,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupermartingaleReport {
    pub times: Vec<f64>,
    /// Estimates of `m(t) = E[e^{-k t} R_t^p]`.
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Mean and standard error of the paired increments `m(t_{j+1}) - m(t_j)`.
    pub increment: Vec<f64>,
    pub increment_std_err: Vec<f64>,
    /// Whether every increment is at most two standard errors above zero.
    pub nonincreasing: bool,
    pub diagnostics: Diagnostics,
}

/// Estimates `E[e^{-k(p) t} R_t^p]` at increasing `times` under `policy` and
/// checks it does not increase beyond two standard errors of the paired
/// differences.
pub fn check_supermartingale(
    model: &ValidatedModel,
    policy: &PolicyTable,
    init: InitialState,
    times: &[f64],
    cfg: &SimConfig,
) -> Result<SupermartingaleReport, SimError> {
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) || times[0] < 0.0 {
        return Err(SimError::InvalidConfig("observation times must increase from a nonnegative start".into()));
    }
    let horizon = *times.last().unwrap();
    let cfg_run = SimConfig {
        horizon: horizon.max(cfg.dt),
        truncate_after_events: None,
        ..cfg.clone()
    };
    check_inputs(model, std::slice::from_ref(policy), init, &cfg_run)?;
    let spec = PathSpec {
        model,
        prefs: model.prefs(),
        stages: std::slice::from_ref(policy),
        truncate: None,
        horizon: cfg_run.horizon,
        dt: cfg.dt,
        checkpoints: times,
        growth_k: model.growth().k,
    };
    let outcomes = run_all(&spec, init, &cfg_run);
    let diagnostics = outcomes
        .iter()
        .fold(Diagnostics::default(), |acc, o| acc.merge(&o.diag));
    let kept: Vec<&PathOutcome> = outcomes.iter().filter(|o| o.diag.rejected_paths == 0).collect();
    let column = |j: usize| kept.iter().map(|o| o.marks[j]).collect::<Vec<f64>>();
    let mut mean = Vec::new();
    let mut std_err = Vec::new();
    for j in 0..times.len() {
        let (m, s) = mean_and_std_err(&column(j));
        mean.push(m);
        std_err.push(s);
    }
    let mut increment = Vec::new();
    let mut increment_std_err = Vec::new();
    let mut nonincreasing = true;
    for j in 1..times.len() {
        let diffs: Vec<f64> = kept.iter().map(|o| o.marks[j] - o.marks[j - 1]).collect();
        let (m, s) = mean_and_std_err(&diffs);
        // a deterministic path has no sampling error; allow rounding only
        if m > 2.0 * s + 1e-12 * mean[j - 1].abs() {
            nonincreasing = false;
        }
        increment.push(m);
        increment_std_err.push(s);
    }
    Ok(SupermartingaleReport {
        times: times.to_vec(),
        mean,
        std_err,
        increment,
        increment_std_err,
        nonincreasing,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_model, MarketModel};
    use crate::solver::{solve_phi, GridConfig};
    use proptest::prelude::*;

    fn prefs() -> CrraParams {
        CrraParams::new(0.5, 0.2)
    }

    fn single(lambda: f64) -> ValidatedModel {
        validate_model(&MarketModel::single(0.4, 1.0, lambda), prefs()).unwrap()
    }

    fn cfg(n_paths: usize, horizon: f64, dt: f64) -> SimConfig {
        SimConfig {
            n_paths,
            horizon,
            dt,
            seed: 7,
            truncate_after_events: None,
        }
    }

    /// Deterministic cash-only run: `x_t = e^{-c t}`, utility in closed form.
    fn cash_only_value(c: f64, horizon: f64) -> f64 {
        let p = 0.5;
        let rate = 0.2 + p * c;
        c.powf(p) / p / rate * (1.0 - (-rate * horizon).exp())
    }

    #[test]
    fn no_consumption_has_zero_value() {
        let m = single(1.0);
        let pol = PolicyTable::constant(1, 11, 0.0, 0.6).unwrap();
        let res = simulate_value(&m, &pol, InitialState::new(0, 1.0, 0.5), &cfg(50, 5.0, 1e-2)).unwrap();
        assert_eq!(res.estimate, 0.0);
        assert_eq!(res.std_err, 0.0);
        assert_eq!(res.diagnostics.violations(), 0);
    }

    #[test]
    fn zero_events_allowed_has_zero_value() {
        let m = single(1.0);
        let pol = PolicyTable::constant(1, 11, 0.3, 0.6).unwrap();
        let c = SimConfig {
            truncate_after_events: Some(0),
            ..cfg(20, 5.0, 1e-2)
        };
        let res = simulate_value(&m, &pol, InitialState::new(0, 1.0, 0.5), &c).unwrap();
        assert_eq!(res.estimate, 0.0);
    }

    #[test]
    fn cash_only_matches_closed_form_at_first_order() {
        // no stock, no trades to speak of: the only error is the quadrature
        let m = single(1e-9);
        let pol = PolicyTable::constant(1, 11, 0.3, 0.0).unwrap();
        let init = InitialState::new(0, 1.0, 0.0);
        let exact = cash_only_value(0.3, 10.0);
        let err = |dt: f64| {
            let r = simulate_value(&m, &pol, init, &cfg(1, 10.0, dt)).unwrap();
            r.estimate - exact
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        assert!(e1.abs() < 2e-3 * exact, "{e1}");
        let ratio = e1 / e2;
        assert!((ratio - 2.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn runs_are_bitwise_reproducible_across_thread_counts() {
        let m = single(1.0);
        let pol = PolicyTable::constant(1, 21, 0.25, 0.7).unwrap();
        let init = InitialState::new(0, 1.0, 0.3);
        let c = cfg(37, 3.0, 1e-2);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_value(&m, &pol, init, &c).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.estimate.to_bits(), b.estimate.to_bits());
        assert_eq!(a.std_err.to_bits(), b.std_err.to_bits());
        assert_eq!(a.diagnostics, b.diagnostics);
        let other = simulate_value(&m, &pol, init, &SimConfig { seed: 8, ..c }).unwrap();
        assert_ne!(a.estimate, other.estimate);
    }

    #[test]
    fn idle_cash_decays_at_the_growth_rate() {
        // R stays 1, so m(t) = e^{-k t} exactly with k = 0.08
        let m = single(1.0);
        let pol = PolicyTable::constant(1, 11, 0.0, 0.0).unwrap();
        let times = [0.0, 1.0, 2.0, 5.0];
        let rep = check_supermartingale(&m, &pol, InitialState::new(0, 1.0, 0.0), &times, &cfg(4, 5.0, 1e-2)).unwrap();
        assert!(rep.nonincreasing);
        for (t, v) in times.iter().zip(&rep.mean) {
            assert!((v - (-0.08 * t).exp()).abs() < 1e-12, "{t} {v}");
        }
    }

    #[test]
    fn buy_and_hold_moment_matches_lognormal() {
        // Y^p grows at p b - p(1-p) sigma^2 / 2 = 0.075 < k
        let m = single(1.0);
        let pol = PolicyTable::constant(1, 11, 0.0, 1.0).unwrap();
        let times = [0.0, 1.0, 2.0, 5.0];
        let rep = check_supermartingale(&m, &pol, InitialState::new(0, 1.0, 1.0), &times, &cfg(4000, 5.0, 1e-3)).unwrap();
        assert!(rep.nonincreasing);
        assert_eq!(rep.diagnostics.violations(), 0);
        for j in 1..times.len() {
            let exact = (-0.005 * times[j]).exp();
            assert!((rep.mean[j] - exact).abs() < 4.0 * rep.std_err[j], "{} vs {exact}", rep.mean[j]);
        }
    }

    #[test]
    fn boundary_identity_holds_and_scales() {
        let m = single(1.0);
        let sol = solve_phi(&m, &GridConfig::with_points(401)).unwrap();
        let c = cfg(20_000, 1.0, 1e-3);
        let one = check_boundary_identity(&m, &sol, 0, 1.0, &c).unwrap();
        assert!(one.z_score().abs() < 4.0, "{one:?}");
        let two = check_boundary_identity(&m, &sol, 0, 2.0, &c).unwrap();
        assert!((two.estimate / one.estimate - 2f64.sqrt()).abs() < 1e-12);
        assert!((two.grid_value / one.grid_value - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn regime_jumps_follow_the_stock_loss_rule() {
        let model = MarketModel {
            q: vec![vec![-1.0, 1.0], vec![2.0, -2.0]],
            lambda: vec![1.0, 1.0],
            b: vec![0.4, 0.4],
            sigma: vec![1.0, 2.0],
            gamma: vec![vec![0.0, 0.3], vec![0.1, 0.0]],
        };
        let m = validate_model(&model, prefs()).unwrap();
        let pol = PolicyTable::constant(2, 11, 0.2, 0.5).unwrap();
        let res = simulate_value(&m, &pol, InitialState::new(1, 1.0, 0.5), &cfg(300, 5.0, 1e-2)).unwrap();
        assert!(res.diagnostics.switches > 0);
        assert_eq!(res.diagnostics.violations(), 0);
        assert!(res.estimate > 0.0);
    }

    #[test]
    fn trace_is_ordered_and_bounded() {
        let m = single(1.0);
        let pol = PolicyTable::constant(1, 11, 0.2, 0.5).unwrap();
        let rows = simulate_trace(&m, &pol, InitialState::new(0, 1.0, 0.5), &cfg(500, 2.0, 1e-2), 500, 10).unwrap();
        assert_eq!(rows.iter().map(|r| r.path).max(), Some(MAX_TRACE_PATHS - 1));
        for w in rows.windows(2).filter(|w| w[0].path == w[1].path) {
            assert!(w[1].t >= w[0].t && w[1].disc_util >= w[0].disc_util);
        }
        assert!(rows.iter().all(|r| r.r >= 0.0 && (0.0..=1.0).contains(&r.z)));
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = single(1.0);
        let pol = PolicyTable::constant(1, 11, 0.2, 0.5).unwrap();
        let two = PolicyTable::constant(2, 11, 0.2, 0.5).unwrap();
        let ok = InitialState::new(0, 1.0, 0.5);
        let good = cfg(10, 1.0, 1e-2);
        assert!(matches!(
            simulate_value(&m, &pol, ok, &cfg(0, 1.0, 1e-2)),
            Err(SimError::InvalidConfig(_))
        ));
        assert!(matches!(
            simulate_value(&m, &pol, ok, &cfg(10, 1.0, 0.0)),
            Err(SimError::InvalidConfig(_))
        ));
        assert!(matches!(
            simulate_value(&m, &pol, InitialState::new(0, 1.0, 1.5), &good),
            Err(SimError::InvalidInitialState(_))
        ));
        assert!(matches!(
            simulate_value(&m, &pol, InitialState::new(1, 1.0, 0.5), &good),
            Err(SimError::InvalidInitialState(_))
        ));
        assert!(matches!(
            simulate_value(&m, &two, ok, &good),
            Err(SimError::RegimeMismatch { .. })
        ));
        assert!(check_supermartingale(&m, &pol, ok, &[1.0, 0.5], &good).is_err());
    }

    #[test]
    fn tail_bound_constant() {
        // C = ((1/2) 4 / 0.12)^{1/2}
        let m = single(1.0);
        let c = (2.0f64 / 0.12).sqrt();
        assert!((tail_bound(&m, 1.0, 0.0) - c).abs() < 1e-12);
        assert!((tail_bound(&m, 4.0, 60.0) - 2.0 * c * (-0.12f64 * 60.0).exp()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn decay_matches_exp(a in 0.0f64..2e-3) {
            prop_assert!((decay(a) - (-a).exp()).abs() <= 2e-16);
        }

        #[test]
        fn pairwise_sum_of_integers_is_exact(v in proptest::collection::vec(-1000i32..1000, 0..500)) {
            let f: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            prop_assert_eq!(pairwise_sum(&f), v.iter().map(|&x| x as i64).sum::<i64>() as f64);
        }

        #[test]
        fn constant_samples_have_no_error(c in -10.0f64..10.0, n in 2usize..100) {
            let (m, s) = mean_and_std_err(&vec![c; n]);
            prop_assert!((m - c).abs() < 1e-12 && s < 1e-12);
        }
    }
}
