//! Optimal feedback controls, values in original variables and the cost of
//! liquidity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::merton::MertonSolution;
use crate::model::{CrraParams, ValidatedModel};
use crate::solver::{argmax_first, interp_linear, node_derivative, singular_coefficients, GridSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("grid solution did not converge; refusing to extract a policy")]
    NonconvergedInput,
    #[error("consumption argument {value} is not positive at z = {z} in regime {regime}")]
    NonpositiveArgument { regime: usize, z: f64, value: f64 },
    #[error("policy table is malformed: {0}")]
    Malformed(String),
}

/// Feedback policy on the shared grid.
///
/// `c_star[i][k]` is the consumption rate per unit of wealth in regime `i` at
/// stock proportion `z[k]`; `pi_star[i]` is the proportion restored at a
/// trading time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub z: Vec<f64>,
    pub c_star: Vec<Vec<f64>>,
    pub pi_star: Vec<f64>,
    /// Set when `z` is the uniform grid, enabling a direct bracket lookup.
    #[serde(skip)]
    uniform: bool,
}

fn is_uniform(z: &[f64]) -> bool {
    let n = z.len();
    z == crate::solver::uniform_grid(n).as_slice()
}

impl PolicyTable {
    /// Arbitrary admissible policy, e.g. for probing the simulator with a
    /// suboptimal strategy.
    pub fn new(z: Vec<f64>, c_star: Vec<Vec<f64>>, pi_star: Vec<f64>) -> Result<Self, PolicyError> {
        if z.len() < 2 || z[0] != 0.0 || z[z.len() - 1] != 1.0 || z.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PolicyError::Malformed("grid must increase from 0 to 1".into()));
        }
        if c_star.len() != pi_star.len() || c_star.is_empty() {
            return Err(PolicyError::Malformed("one consumption row and one target per regime".into()));
        }
        for row in &c_star {
            if row.len() != z.len() {
                return Err(PolicyError::Malformed("consumption row length differs from grid".into()));
            }
            if row.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
                return Err(PolicyError::Malformed("consumption rates must be finite and nonnegative".into()));
            }
        }
        if pi_star.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(PolicyError::Malformed("rebalancing targets must lie in [0,1]".into()));
        }
        let uniform = is_uniform(&z);
        Ok(Self {
            z,
            c_star,
            pi_star,
            uniform,
        })
    }

    /// Same consumption rate and target everywhere.
    pub fn constant(regimes: usize, n_points: usize, c: f64, pi: f64) -> Result<Self, PolicyError> {
        let z = crate::solver::uniform_grid(n_points);
        Self::new(z, vec![vec![c; n_points]; regimes], vec![pi; regimes])
    }

    pub fn regimes(&self) -> usize {
        self.pi_star.len()
    }

    /// `c*(i, z)` by linear interpolation; `z` is clamped to `[0,1]`.
    pub fn consumption(&self, i: usize, z: f64) -> f64 {
        let row = &self.c_star[i];
        let n = self.z.len();
        let z = z.clamp(0.0, 1.0);
        let s = z * (n - 1) as f64;
        let mut k = (s as usize).min(n - 2);
        if self.uniform {
            // no search and no division
            let w = (s - k as f64).min(1.0);
            return row[k] + w * (row[k + 1] - row[k]);
        }
        while k > 0 && z < self.z[k] {
            k -= 1;
        }
        while k + 2 < n && z > self.z[k + 1] {
            k += 1;
        }
        let w = (z - self.z[k]) / (self.z[k + 1] - self.z[k]);
        row[k] + w * (row[k + 1] - row[k])
    }
}

/// Consumption rates from nodal values: `(phi - (z/p) phi')^{-1/(1-p)}`, with
/// `phi(0)^{-1/(1-p)}` at `z = 0` and `0` at `z = 1`.
///
/// `dphi(k)` supplies `phi'` at interior node `k`.
fn consumption_row(
    regime: usize,
    z: &[f64],
    phi: &[f64],
    dphi: impl Fn(usize) -> f64,
    p: f64,
) -> Result<Vec<f64>, PolicyError> {
    let n = z.len();
    let e = -1.0 / (1.0 - p);
    let mut c = vec![0.0; n];
    c[0] = phi[0].powf(e);
    for k in 1..n - 1 {
        let u = phi[k] - z[k] / p * dphi(k);
        if !(u > 0.0) {
            return Err(PolicyError::NonpositiveArgument { regime, z: z[k], value: u });
        }
        c[k] = u.powf(e);
    }
    Ok(c)
}

/// Optimal feedback policy of a converged solution.
pub fn extract_policy(sol: &GridSolution, prefs: CrraParams) -> Result<PolicyTable, PolicyError> {
    if !sol.converged {
        return Err(PolicyError::NonconvergedInput);
    }
    let c_star = (0..sol.regimes())
        .map(|i| consumption_row(i, &sol.z, &sol.phi[i], |k| sol.derivative(i, k), prefs.p))
        .collect::<Result<Vec<_>, _>>()?;
    let pi_star = (0..sol.regimes()).map(|i| sol.z[sol.max_phi(i).0]).collect();
    Ok(PolicyTable {
        uniform: is_uniform(&sol.z),
        z: sol.z.clone(),
        c_star,
        pi_star,
    })
}

/// Policies that are optimal for the problems with consumption stopped at the
/// `n`-th event: entry `m` (for `m = 1..=n`) belongs to the recorded iterate
/// `phi^m`, i.e. to the stage with `m` events still to come. Entry 0 is a
/// placeholder that never consumes.
pub fn stage_policies(sol: &GridSolution, model: &ValidatedModel, n: usize) -> Result<Vec<PolicyTable>, PolicyError> {
    let d = sol.regimes();
    let len = sol.z.len();
    let uniform = is_uniform(&sol.z);
    let mut out = vec![PolicyTable {
        uniform,
        z: sol.z.clone(),
        c_star: vec![vec![0.0; len]; d],
        pi_star: vec![0.0; d],
    }];
    // (1-z)^p coefficients of the iterates follow their own recursion; rebuild
    // them from phi^0 = 0 exactly as the solver did
    let mut singular = vec![0.0; d];
    for m in 1..=n {
        let phi = sol.iterates.get(&m).ok_or_else(|| {
            PolicyError::Malformed(format!("iterate {m} was not recorded by the solver"))
        })?;
        singular = singular_coefficients(&singular, model);
        let c_star = (0..d)
            .map(|i| {
                let dphi = |k| node_derivative(&sol.z, &phi[i], singular[i], sol.p, k);
                consumption_row(i, &sol.z, &phi[i], dphi, sol.p)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pi_star = phi.iter().map(|row| sol.z[argmax_first(row).0]).collect();
        out.push(PolicyTable {
            uniform,
            z: sol.z.clone(),
            c_star,
            pi_star,
        });
    }
    Ok(out)
}

/// `v_i(x, y) = U(x+y) phi_i(y/(x+y))` with linear interpolation in `z`.
pub fn value_at(sol: &GridSolution, i: usize, x: f64, y: f64) -> f64 {
    let r = x + y;
    if r <= 0.0 {
        return 0.0;
    }
    r.powf(sol.p) / sol.p * interp_linear(&sol.phi[i], y / r)
}

/// Best value over initial allocations of wealth `r`: `U(r) max_z phi_i`.
pub fn best_value(sol: &GridSolution, i: usize, r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    r.powf(sol.p) / sol.p * sol.max_phi(i).1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiquidityCostReport {
    /// Extra initial wealth fraction `P_i(1)` per regime.
    pub cost: Vec<f64>,
    pub phi_max: Vec<f64>,
    pub phi_merton: Vec<f64>,
    pub pi_star: Vec<f64>,
    pub prefs: CrraParams,
    pub n_points: usize,
}

/// `P_i(1) = (phi_{i,M} / max_z phi_i)^{1/p} - 1`, solving
/// `v̂_i(1 + P) = v̂_{i,M}(1)`. By homogeneity `P_i(x) = x P_i(1)`.
pub fn liquidity_cost(sol: &GridSolution, bench: &MertonSolution, prefs: CrraParams) -> LiquidityCostReport {
    let d = sol.regimes();
    let phi_max: Vec<f64> = (0..d).map(|i| sol.max_phi(i).1).collect();
    LiquidityCostReport {
        cost: (0..d)
            .map(|i| (bench.phi_m[i] / phi_max[i]).powf(1.0 / prefs.p) - 1.0)
            .collect(),
        pi_star: (0..d).map(|i| sol.z[sol.max_phi(i).0]).collect(),
        phi_merton: bench.phi_m.clone(),
        phi_max,
        prefs,
        n_points: sol.z.len(),
    }
}
