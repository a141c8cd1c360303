//! Reduced value functions `phi_i` on `[0,1]`.
//!
//! Under power utility the value function separates as
//! `v_i(x,y) = U(x+y) phi_i(y/(x+y))`, and `phi` solves a system of
//! degenerate second-order ODEs coupled through two nonlocal terms: the
//! warped neighbour values after a regime switch and `sup phi_i` reached at a
//! trading time. Both nonlocal terms are frozen at the previous outer iterate
//! `phi^n`, which leaves one local nonlinear two-point problem per regime for
//! `phi^{n+1}`. Starting from `phi^0 = 0` the iterates increase to `phi`
//! geometrically.
//!
//! The local problem is discretised by central differences on a uniform grid
//! and solved by Newton's method; its Jacobian is tridiagonal. The end nodes
//! obey the algebraic equations the ODE degenerates to at `z = 0` and `z = 1`.
//!
//! Near `z = 1` the solution behaves like `phi(1) + a (1-z)^p`, and plain
//! central differences of that term cost a full order of accuracy. The
//! difference quotients are therefore applied to `phi - a (1-z)^p` only, with
//! the singular part differentiated exactly. Its coefficient obeys the scalar
//! recursion `(rho - q_ii + lambda_i) a - (1-p) a^{-p/(1-p)} = sum_{j != i} q_ij a_j`
//! along the outer iterates (see [`singular_coefficients`]).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{dual_utility, ValidatedModel};
use crate::tridiag::solve_tridiagonal;

/// Nodewise slack allowed when checking that outer iterates increase.
pub const MONOTONE_TOL: f64 = 1e-12;

const MAX_HALVINGS: usize = 30;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid grid configuration: {0}")]
    InvalidConfig(String),
    #[error("Newton solve for regime {regime} did not converge (scaled residual {residual:e})")]
    InnerNoConvergence { regime: usize, residual: f64 },
    #[error("consumption floor still active at z = {z} in regime {regime}; refine the grid")]
    FloorActiveAtSolution { regime: usize, z: f64 },
    #[error("boundary coefficient at z = 1 is {coefficient} in regime {regime}; must be positive")]
    NonpositiveCoefficient { regime: usize, coefficient: f64 },
    #[error("outer iteration stopped after {iterations} steps with increment {increment:e}")]
    OuterNoConvergence {
        iterations: usize,
        increment: f64,
        partial: Box<GridSolution>,
    },
    #[error("outer iterate decreased by {decrease:e} at step {iteration} (regime {regime}, node {node})")]
    MonotonicityViolation {
        iteration: usize,
        regime: usize,
        node: usize,
        decrease: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n_points: usize,
    pub tol_outer: f64,
    pub tol_inner: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub floor_eps: f64,
    /// Outer iterates `phi^n` to keep in the solution, by `n`.
    pub record_iterates: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_points: 2001,
            tol_outer: 1e-9,
            tol_inner: 1e-12,
            max_outer: 50_000,
            max_inner: 50,
            floor_eps: 1e-12,
            record_iterates: Vec::new(),
        }
    }
}

impl GridConfig {
    pub fn with_points(n_points: usize) -> Self {
        Self {
            n_points,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.n_points < 3 {
            return Err(SolverError::InvalidConfig(format!(
                "n_points = {} must be at least 3",
                self.n_points
            )));
        }
        for (name, v) in [
            ("tol_outer", self.tol_outer),
            ("tol_inner", self.tol_inner),
            ("floor_eps", self.floor_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SolverError::InvalidConfig(format!("{name} = {v} must be positive")));
            }
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(SolverError::InvalidConfig("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

pub fn uniform_grid(n: usize) -> Vec<f64> {
    let h = 1.0 / (n - 1) as f64;
    (0..n).map(|k| if k + 1 == n { 1.0 } else { k as f64 * h }).collect()
}

/// Linear interpolation of nodal values on the uniform grid of `[0,1]`.
pub fn interp_linear(values: &[f64], z: f64) -> f64 {
    let n = values.len();
    let s = z.clamp(0.0, 1.0) * (n - 1) as f64;
    let k = (s.floor() as usize).min(n - 2);
    let w = s - k as f64;
    values[k] + w * (values[k + 1] - values[k])
}

/// Four-point Lagrange interpolation on the uniform grid; smooth enough to
/// difference the reconstruction of `v` twice.
pub fn interp_cubic(values: &[f64], z: f64) -> f64 {
    let n = values.len();
    if n < 4 {
        return interp_linear(values, z);
    }
    let s = z.clamp(0.0, 1.0) * (n - 1) as f64;
    let k = (s.floor() as usize).clamp(1, n - 3);
    let t = s - k as f64;
    let (f0, f1, f2, f3) = (values[k - 1], values[k], values[k + 1], values[k + 2]);
    -t * (t - 1.0) * (t - 2.0) / 6.0 * f0 + (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0 * f1
        - (t + 1.0) * t * (t - 2.0) / 2.0 * f2
        + (t + 1.0) * t * (t - 1.0) / 6.0 * f3
}

/// Index and value of the maximum; the lowest index wins ties.
pub fn argmax_first(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

/// Post-jump proportion `z (1-gamma) / (1 - z gamma)`.
pub fn warp(z: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        z
    } else {
        (z * (1.0 - gamma) / (1.0 - z * gamma)).clamp(0.0, 1.0)
    }
}

/// Previous outer iterate together with the nonlocal terms it freezes.
#[derive(Debug, Clone)]
pub struct IterationState {
    pub phi_prev: Vec<Vec<f64>>,
    pub rhs: Vec<Vec<f64>>,
    pub sup_phi_prev: Vec<f64>,
}

impl IterationState {
    pub fn new(phi_prev: Vec<Vec<f64>>, z: &[f64], model: &ValidatedModel) -> Self {
        let sup_phi_prev = phi_prev.iter().map(|row| argmax_first(row).1).collect();
        let rhs = nonlocal_rhs(&phi_prev, z, model);
        Self {
            phi_prev,
            rhs,
            sup_phi_prev,
        }
    }
}

/// Frozen right-hand side
/// `sum_{j != i} q_ij (1 - z gamma_ij)^p phi_j(warp(z)) + lambda_i max_k phi_i(z_k)`.
pub fn nonlocal_rhs(phi_prev: &[Vec<f64>], z: &[f64], model: &ValidatedModel) -> Vec<Vec<f64>> {
    let d = model.regimes();
    let p = model.prefs().p;
    (0..d)
        .map(|i| {
            let jump_to_trade = model.lambda(i) * argmax_first(&phi_prev[i]).1;
            z.iter()
                .enumerate()
                .map(|(k, &zk)| {
                    let mut acc = jump_to_trade;
                    for j in (0..d).filter(|&j| j != i) {
                        let q = model.q(i, j);
                        if q == 0.0 {
                            continue;
                        }
                        let g = model.gamma(i, j);
                        acc += if g == 0.0 {
                            q * phi_prev[j][k]
                        } else {
                            q * (1.0 - zk * g).powf(p) * interp_linear(&phi_prev[j], warp(zk, g))
                        };
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Unique positive root of `a phi - (1-p) phi^{-p/(1-p)} = rhs` for `a > 0`,
/// `rhs >= 0`.
pub fn consumption_root(a: f64, rhs: f64, p: f64) -> f64 {
    let e = -p / (1.0 - p);
    let f = |x: f64| a * x - (1.0 - p) * x.powf(e) - rhs;
    // f(m) <= 0 at the rhs = 0 root m, and f(m + rhs/a) >= 0
    let m = ((1.0 - p) / a).powf(1.0 - p);
    let (mut lo, mut hi) = (m, m + rhs.max(0.0) / a);
    if f(hi) <= 0.0 {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-10 * hi {
            break;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..8 {
        let fx = f(x);
        let df = a + p * x.powf(-1.0 / (1.0 - p));
        let next = x - fx / df;
        if !(next > 0.0) {
            break;
        }
        let done = (next - x).abs() <= 1e-15 * x;
        x = next;
        if done {
            break;
        }
    }
    x
}

/// `phi_i(0)` from `(rho - q_ii + lambda_i) phi - (1-p) phi^{-p/(1-p)} = rhs_at_0`.
pub fn boundary_solve_z0(rhs_at_0: f64, regime: usize, model: &ValidatedModel) -> f64 {
    let prefs = model.prefs();
    let a = prefs.rho - model.q(regime, regime) + model.lambda(regime);
    consumption_root(a, rhs_at_0, prefs.p)
}

/// Left coefficient of the linear equation for `phi_i(1)`.
pub fn z1_coefficient(regime: usize, model: &ValidatedModel) -> f64 {
    let prefs = model.prefs();
    let (p, s) = (prefs.p, model.sigma(regime));
    prefs.rho - model.q(regime, regime) + model.lambda(regime) - p * model.b(regime)
        + 0.5 * p * (1.0 - p) * s * s
}

/// `phi_i(1)` from the linear boundary equation; `coupling` is the frozen
/// right-hand side at `z = 1`.
pub fn boundary_solve_z1(coupling: f64, regime: usize, model: &ValidatedModel) -> Result<f64, SolverError> {
    let coefficient = z1_coefficient(regime, model);
    if !(coefficient > 0.0) {
        return Err(SolverError::NonpositiveCoefficient { regime, coefficient });
    }
    Ok(coupling / coefficient)
}

/// Coefficients of the `(1-z)^p` term of the next outer iterate, given those
/// of the current one (all zero for `phi^0 = 0`). Regime switches carry the
/// term across unchanged, whatever the jump size.
pub fn singular_coefficients(prev: &[f64], model: &ValidatedModel) -> Vec<f64> {
    let d = model.regimes();
    (0..d)
        .map(|i| {
            let coupling: f64 = (0..d).filter(|&j| j != i).map(|j| model.q(i, j) * prev[j]).sum();
            boundary_solve_z0(coupling, i, model)
        })
        .collect()
}

/// Differences between the exact derivatives of `a (1-z)^p` and their central
/// difference quotients, at each node.
fn singular_corrections(a: f64, z: &[f64], p: f64) -> (Vec<f64>, Vec<f64>) {
    let n = z.len();
    let h = 1.0 / (n - 1) as f64;
    let w: Vec<f64> = z.iter().map(|&z| a * (1.0 - z).max(0.0).powf(p)).collect();
    let mut c1 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    if a == 0.0 {
        return (c1, c2);
    }
    for k in 1..n - 1 {
        let s = 1.0 - z[k];
        let exact1 = -a * p * s.powf(p - 1.0);
        let exact2 = a * p * (p - 1.0) * s.powf(p - 2.0);
        c1[k] = exact1 - (w[k + 1] - w[k - 1]) / (2.0 * h);
        c2[k] = exact2 - (w[k + 1] - 2.0 * w[k] + w[k - 1]) / (h * h);
    }
    (c1, c2)
}

/// `phi'(z_k)` at an interior node of a uniform grid, differencing only
/// `phi - a (1-z)^p` and adding the exact derivative of the singular part.
pub fn node_derivative(z: &[f64], phi: &[f64], a: f64, p: f64, k: usize) -> f64 {
    let h = z[1] - z[0];
    let w = |k: usize| a * (1.0 - z[k]).max(0.0).powf(p);
    (phi[k + 1] - w(k + 1) - phi[k - 1] + w(k - 1)) / (2.0 * h) - a * p * (1.0 - z[k]).powf(p - 1.0)
}

/// ODE coefficients of one regime on the grid:
/// `A phi - B phi' - D phi'' - (1-p)(phi - z phi'/p)^{-p/(1-p)} = rhs`.
struct LocalOperator {
    a: Vec<f64>,
    b: Vec<f64>,
    d: Vec<f64>,
    z: Vec<f64>,
    h: f64,
    p: f64,
    floor: f64,
    corr1: Vec<f64>,
    corr2: Vec<f64>,
}

impl LocalOperator {
    fn new(regime: usize, z: &[f64], model: &ValidatedModel, floor: f64, singular: f64) -> Self {
        let prefs = model.prefs();
        let (p, rho) = (prefs.p, prefs.rho);
        let (b, s) = (model.b(regime), model.sigma(regime));
        let base = rho - model.q(regime, regime) + model.lambda(regime);
        let s2 = s * s;
        let (corr1, corr2) = singular_corrections(singular, z, p);
        Self {
            a: z.iter().map(|&z| base - p * b * z + 0.5 * p * (1.0 - p) * s2 * z * z).collect(),
            b: z.iter().map(|&z| z * (1.0 - z) * (b - z * (1.0 - p) * s2)).collect(),
            d: z.iter().map(|&z| 0.5 * z * z * (1.0 - z) * (1.0 - z) * s2).collect(),
            z: z.to_vec(),
            h: 1.0 / (z.len() - 1) as f64,
            p,
            floor,
            corr1,
            corr2,
        }
    }

    /// Residual at interior nodes, optionally with the tridiagonal Jacobian.
    /// Returns the max residual scaled by the Jacobian diagonal, and whether
    /// the consumption floor clipped any node other than the last interior one.
    fn evaluate(
        &self,
        phi: &[f64],
        rhs: &[f64],
        f: &mut [f64],
        mut jac: Option<(&mut [f64], &mut [f64], &mut [f64])>,
    ) -> (f64, Option<usize>) {
        let n = phi.len();
        let (h, p) = (self.h, self.p);
        let e = -p / (1.0 - p);
        let inv_2h = 0.5 / h;
        let inv_h2 = 1.0 / (h * h);
        let mut scaled = 0.0f64;
        let mut clipped = None;
        for k in 1..n - 1 {
            let dphi = (phi[k + 1] - phi[k - 1]) * inv_2h + self.corr1[k];
            let d2phi = (phi[k + 1] - 2.0 * phi[k] + phi[k - 1]) * inv_h2 + self.corr2[k];
            let z = self.z[k];
            let mut u = phi[k] - z / p * dphi;
            if u < self.floor {
                if k + 2 < n && clipped.is_none() {
                    clipped = Some(k);
                }
                u = self.floor;
            }
            let g = u.powf(e);
            let r = self.a[k] * phi[k] - self.b[k] * dphi - self.d[k] * d2phi - (1.0 - p) * g - rhs[k];
            f[k] = r;
            // d/du of -(1-p) u^{-p/(1-p)} is p * c with c = u^{-1/(1-p)}
            let pc = p * g / u;
            let diag = self.a[k] + 2.0 * self.d[k] * inv_h2 + pc;
            scaled = scaled.max((r / diag).abs());
            if let Some((lo, di, up)) = jac.as_mut() {
                let zc = z * pc / p;
                lo[k] = self.b[k] * inv_2h - self.d[k] * inv_h2 + zc * inv_2h;
                di[k] = diag;
                up[k] = -self.b[k] * inv_2h - self.d[k] * inv_h2 - zc * inv_2h;
            }
        }
        (scaled, clipped)
    }
}

/// Starting guess for the very first outer step, where `phi^0 = 0` makes the
/// consumption term singular: solve the derivative-free scalar equation
/// `A(z) phi - (1-p) phi^{-p/(1-p)} = rhs` node by node.
pub fn scalar_guess(rhs: &[Vec<f64>], z: &[f64], model: &ValidatedModel) -> Vec<Vec<f64>> {
    let p = model.prefs().p;
    (0..model.regimes())
        .map(|i| {
            let op = LocalOperator::new(i, z, model, 0.0, 0.0);
            op.a.iter()
                .zip(&rhs[i])
                .map(|(&a, &r)| consumption_root(a.max(1e-8), r.max(0.0), p))
                .collect()
        })
        .collect()
}

/// One outer step: solve the local problem of every regime with the nonlocal
/// terms frozen in `rhs`.
/// `singular[i]` is the `(1-z)^p` coefficient expected in regime `i`; zero
/// gives plain central differences.
pub fn inner_solve(
    rhs: &[Vec<f64>],
    warm_start: &[Vec<f64>],
    singular: &[f64],
    model: &ValidatedModel,
    cfg: &GridConfig,
) -> Result<Vec<Vec<f64>>, SolverError> {
    let z = uniform_grid(cfg.n_points);
    (0..model.regimes())
        .into_par_iter()
        .map(|i| solve_regime(i, &rhs[i], &warm_start[i], singular[i], &z, model, cfg))
        .collect()
}

fn solve_regime(
    regime: usize,
    rhs: &[f64],
    warm: &[f64],
    singular: f64,
    z: &[f64],
    model: &ValidatedModel,
    cfg: &GridConfig,
) -> Result<Vec<f64>, SolverError> {
    let n = z.len();
    let op = LocalOperator::new(regime, z, model, cfg.floor_eps, singular);
    let left = boundary_solve_z0(rhs[0], regime, model);
    let right = boundary_solve_z1(rhs[n - 1], regime, model)?;
    // shift the warm start by the boundary increments so it matches the new
    // end values; a bare warm start leaves a kink at z = 1
    let (dl, dr) = (left - warm[0], right - warm[n - 1]);
    let mut phi: Vec<f64> = warm
        .iter()
        .zip(z)
        .map(|(&w, &zk)| w + (1.0 - zk) * dl + zk * dr)
        .collect();
    phi[0] = left;
    phi[n - 1] = right;

    let mut f = vec![0.0; n];
    let (mut lo, mut di, mut up) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut trial = phi.clone();
    let mut f_trial = vec![0.0; n];

    let (mut norm, mut clipped) = op.evaluate(&phi, rhs, &mut f, Some((&mut lo, &mut di, &mut up)));
    let mut steps = 0;
    loop {
        // always take one step: the warm start is only the previous iterate
        if steps > 0 && norm < cfg.tol_inner && clipped.is_none() {
            break;
        }
        if steps == cfg.max_inner {
            return Err(SolverError::InnerNoConvergence {
                regime,
                residual: norm,
            });
        }
        steps += 1;
        let m = n - 2;
        let neg_f: Vec<f64> = f[1..n - 1].iter().map(|x| -x).collect();
        let mut sub = lo[1..n - 1].to_vec();
        let mut sup = up[1..n - 1].to_vec();
        sub[0] = 0.0;
        sup[m - 1] = 0.0;
        let delta = solve_tridiagonal(&sub, &di[1..n - 1], &sup, &neg_f).ok_or(
            SolverError::InnerNoConvergence {
                regime,
                residual: norm,
            },
        )?;
        // the residual can stall at roundoff just above tolerance; a step this
        // small means the iterate is already converged
        let step = delta.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if clipped.is_none() && step < cfg.tol_inner {
            for k in 1..n - 1 {
                phi[k] += delta[k - 1];
            }
            break;
        }

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            trial.copy_from_slice(&phi);
            for k in 1..n - 1 {
                trial[k] += alpha * delta[k - 1];
            }
            let (t_norm, t_clip) = op.evaluate(&trial, rhs, &mut f_trial, None);
            // a clipped node has a deceptively small scaled residual
            let admissible = t_clip.is_none() || clipped.is_some();
            if admissible && t_norm.is_finite() && (t_norm < norm || t_norm < cfg.tol_inner) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if norm < cfg.tol_inner {
                break;
            }
            return Err(SolverError::InnerNoConvergence {
                regime,
                residual: norm,
            });
        }
        std::mem::swap(&mut phi, &mut trial);
        (norm, clipped) = op.evaluate(&phi, rhs, &mut f, Some((&mut lo, &mut di, &mut up)));
    }

    let (_, clipped) = op.evaluate(&phi, rhs, &mut f, None);
    if let Some(k) = clipped {
        return Err(SolverError::FloorActiveAtSolution { regime, z: z[k] });
    }
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSolution {
    pub z: Vec<f64>,
    /// `phi[i][k]` approximates `phi_i(z_k)`.
    pub phi: Vec<Vec<f64>>,
    pub n_iter: usize,
    /// Sup-norm increments `|phi^{n+1} - phi^n|`, one per outer step.
    pub history: Vec<f64>,
    /// Geometric mean of the increment ratios over the last ten steps.
    pub contraction: f64,
    pub converged: bool,
    /// Most negative nodewise increment seen over all outer steps.
    pub min_increment: f64,
    /// Requested intermediate iterates `phi^n`.
    pub iterates: BTreeMap<usize, Vec<Vec<f64>>>,
    /// Coefficients `a_i` of the `(1-z)^p` behaviour at `z = 1`.
    pub singular: Vec<f64>,
    /// Utility exponent the solution was computed for.
    pub p: f64,
}

impl GridSolution {
    pub fn regimes(&self) -> usize {
        self.phi.len()
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.z.len() - 1) as f64
    }

    /// `max_k phi_i(z_k)` and its (lowest) node.
    pub fn max_phi(&self, i: usize) -> (usize, f64) {
        argmax_first(&self.phi[i])
    }

    pub fn phi_at(&self, i: usize, z: f64) -> f64 {
        interp_linear(&self.phi[i], z)
    }

    /// Largest interior second difference of any `phi_i`, relative to `max phi_i`.
    pub fn concavity_excess(&self) -> f64 {
        self.phi
            .iter()
            .map(|row| {
                let scale = argmax_first(row).1.abs().max(f64::MIN_POSITIVE);
                row.windows(3)
                    .map(|w| (w[2] - 2.0 * w[1] + w[0]) / scale)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `phi_i'(z_k)` at an interior node.
    pub fn derivative(&self, i: usize, k: usize) -> f64 {
        node_derivative(&self.z, &self.phi[i], self.singular[i], self.p, k)
    }

    /// Smallest consumption argument `phi - (z/p) phi'` over interior nodes.
    pub fn min_consumption_argument(&self) -> f64 {
        let n = self.z.len();
        let mut m = f64::INFINITY;
        for i in 0..self.regimes() {
            for k in 1..n - 1 {
                m = m.min(self.phi[i][k] - self.z[k] / self.p * self.derivative(i, k));
            }
        }
        m
    }
}

/// Run the frozen-nonlocal outer iteration from `phi^0 = 0`.
pub fn solve_phi(model: &ValidatedModel, cfg: &GridConfig) -> Result<GridSolution, SolverError> {
    cfg.validate()?;
    let z = uniform_grid(cfg.n_points);
    let d = model.regimes();
    let mut iterates = BTreeMap::new();
    if cfg.record_iterates.contains(&0) {
        iterates.insert(0, vec![vec![0.0; z.len()]; d]);
    }
    let mut phi = vec![vec![0.0; z.len()]; d];
    let mut singular = vec![0.0; d];
    let mut history = Vec::new();
    let mut min_increment = f64::INFINITY;

    for n in 0..cfg.max_outer {
        let state = IterationState::new(phi, &z, model);
        let next_singular = singular_coefficients(&singular, model);
        // seed the (1-z)^p shape: Newton started without it can settle on a
        // spurious discrete solution oscillating next to z = 1
        let mut guess = if n == 0 {
            scalar_guess(&state.rhs, &z, model)
        } else {
            state.phi_prev.clone()
        };
        for (i, row) in guess.iter_mut().enumerate() {
            let p = model.prefs().p;
            for (g, &zk) in row.iter_mut().zip(&z) {
                let shape = (1.0 - zk).powf(p);
                *g = if n == 0 {
                    g.min(next_singular[i] * shape)
                } else {
                    *g + (next_singular[i] - singular[i]) * shape
                };
            }
        }
        singular = next_singular;
        let next = inner_solve(&state.rhs, &guess, &singular, model, cfg)?;

        let mut increment = 0.0f64;
        for i in 0..d {
            for k in 0..z.len() {
                let diff = next[i][k] - state.phi_prev[i][k];
                increment = increment.max(diff.abs());
                if diff < min_increment {
                    min_increment = diff;
                }
                if diff < -MONOTONE_TOL {
                    return Err(SolverError::MonotonicityViolation {
                        iteration: n + 1,
                        regime: i,
                        node: k,
                        decrease: -diff,
                    });
                }
            }
        }
        history.push(increment);
        phi = next;
        if cfg.record_iterates.contains(&(n + 1)) {
            iterates.insert(n + 1, phi.clone());
        }
        if increment < cfg.tol_outer {
            return Ok(GridSolution {
                contraction: contraction_estimate(&history),
                z,
                phi,
                n_iter: n + 1,
                history,
                converged: true,
                min_increment,
                iterates,
                singular,
                p: model.prefs().p,
            });
        }
    }

    let increment = history.last().copied().unwrap_or(f64::INFINITY);
    Err(SolverError::OuterNoConvergence {
        iterations: cfg.max_outer,
        increment,
        partial: Box::new(GridSolution {
            contraction: contraction_estimate(&history),
            z,
            phi,
            n_iter: cfg.max_outer,
            history,
            converged: false,
            min_increment,
            iterates,
            singular,
            p: model.prefs().p,
        }),
    })
}

/// Geometric mean of `e_{n+1}/e_n` over (up to) the last ten ratios.
pub fn contraction_estimate(history: &[f64]) -> f64 {
    let n = history.len();
    if n < 2 {
        return f64::NAN;
    }
    let span = (n - 1).min(10);
    let (last, first) = (history[n - 1], history[n - 1 - span]);
    (last / first).powf(1.0 / span as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub max: f64,
    pub mean: f64,
    pub samples: usize,
}

/// Range of `z = y/(x+y)` sampled by [`hjb_residual`]. The reconstruction is
/// differenced numerically, which is unreliable where `phi'` blows up at 1.
pub const RESIDUAL_Z_RANGE: (f64, f64) = (0.05, 0.95);

/// Residual of the two-dimensional HJB equation for `v_i(x,y) = U(x+y) phi_i(y/(x+y))`
/// at random interior points, normalised by `rho v_i`.
///
/// Derivatives of the reconstruction are taken by central finite differences
/// in `(x, y)`; `phi` is evaluated by cubic interpolation between nodes.
pub fn hjb_residual(sol: &GridSolution, model: &ValidatedModel, samples: usize, seed: u64) -> ResidualStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<(usize, f64, f64)> = (0..samples)
        .map(|s| {
            let i = s % sol.regimes();
            let r = 10f64.powf(rng.random_range(-1.0..1.0));
            let z = rng.random_range(RESIDUAL_Z_RANGE.0..RESIDUAL_Z_RANGE.1);
            (i, r * (1.0 - z), r * z)
        })
        .collect();
    let values: Vec<f64> = points
        .iter()
        .map(|&(i, x, y)| hjb_residual_at(sol, model, i, x, y))
        .collect();
    ResidualStats {
        max: values.iter().fold(0.0, |m, v| m.max(*v)),
        mean: values.iter().sum::<f64>() / samples.max(1) as f64,
        samples,
    }
}

/// Normalised HJB residual at a single interior point.
pub fn hjb_residual_at(sol: &GridSolution, model: &ValidatedModel, i: usize, x: f64, y: f64) -> f64 {
    let prefs = model.prefs();
    let p = prefs.p;
    let v = |j: usize, x: f64, y: f64| {
        let r = x + y;
        if r <= 0.0 {
            0.0
        } else {
            prefs.utility(r) * interp_cubic(&sol.phi[j], y / r)
        }
    };
    let r = x + y;
    let step = 1e-3 * r;
    let v0 = v(i, x, y);
    let v_x = (v(i, x + step, y) - v(i, x - step, y)) / (2.0 * step);
    let v_y = (v(i, x, y + step) - v(i, x, y - step)) / (2.0 * step);
    let v_yy = (v(i, x, y + step) - 2.0 * v0 + v(i, x, y - step)) / (step * step);
    let (b, s) = (model.b(i), model.sigma(i));

    let mut lhs = prefs.rho * v0 - b * y * v_y - 0.5 * s * s * y * y * v_yy;
    lhs -= dual_utility(v_x, p).unwrap_or(f64::INFINITY);
    for j in (0..sol.regimes()).filter(|&j| j != i) {
        let q = model.q(i, j);
        if q != 0.0 {
            lhs -= q * (v(j, x, y * (1.0 - model.gamma(i, j))) - v0);
        }
    }
    let v_hat = prefs.utility(r) * sol.max_phi(i).1;
    lhs -= model.lambda(i) * (v_hat - v0);
    (lhs / (prefs.rho * v0)).abs()
}
