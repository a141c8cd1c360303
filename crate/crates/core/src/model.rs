//! Market model, CRRA preferences and the growth constant `k(p)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest tolerated mismatch between a user supplied diagonal entry of the
/// generator and minus the sum of the off-diagonal rates of its row.
const GENERATOR_ROW_TOL: f64 = 1e-8;

/// Spacing of the coarse scan used to bracket the maximiser in `k(p)`.
const K_SCAN_STEP: f64 = 1e-3;
const K_GOLDEN_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model has no regimes")]
    Empty,
    #[error("field `{field}` has length {got}, expected {expected}")]
    ShapeMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid generator entry q[{row}][{col}] = {value}: {reason}")]
    InvalidGenerator {
        row: usize,
        col: usize,
        value: f64,
        reason: &'static str,
    },
    #[error("invalid jump loss gamma[{row}][{col}] = {value}: must be < 1 off the diagonal and 0 on it")]
    InvalidGamma { row: usize, col: usize, value: f64 },
    #[error("trading intensity lambda[{regime}] = {value} must be positive")]
    InvalidIntensity { regime: usize, value: f64 },
    #[error("volatility sigma[{regime}] = {value} must be finite and nonnegative")]
    InvalidVolatility { regime: usize, value: f64 },
    #[error("drift b[{regime}] = {value} must be finite")]
    InvalidDrift { regime: usize, value: f64 },
    #[error("risk aversion exponent p = {0} must lie in (0, 1)")]
    InvalidExponent(f64),
    #[error("discount rate rho = {rho} must exceed the growth constant k(p) = {k}")]
    DiscountTooSmall { rho: f64, k: f64 },
    #[error("dual utility is infinite for nonpositive argument {0}")]
    NonpositiveArgument(f64),
}

/// Regime-switching market with Cox trading times.
///
/// `q` is the generator of the regime chain, `lambda[i]` the trading intensity
/// in regime `i`, `b`/`sigma` the stock drift and volatility, and `gamma[i][j]`
/// the relative stock loss when the chain jumps from `i` to `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    pub q: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
}

impl MarketModel {
    /// One regime without liquidity shocks.
    pub fn single(b: f64, sigma: f64, lambda: f64) -> Self {
        Self {
            q: vec![vec![0.0]],
            lambda: vec![lambda],
            b: vec![b],
            sigma: vec![sigma],
            gamma: vec![vec![0.0]],
        }
    }

    pub fn regimes(&self) -> usize {
        self.b.len()
    }

    /// Objective maximised by `k(p)` for regime `i` at proportion `z`.
    pub fn growth_objective(&self, i: usize, p: f64, z: f64) -> f64 {
        let (b, s) = (self.b[i], self.sigma[i]);
        let mut v = p * b * z - 0.5 * s * s * p * (1.0 - p) * z * z;
        for (j, &qij) in self.q[i].iter().enumerate() {
            if j != i && qij != 0.0 {
                v += qij * ((1.0 - z * self.gamma[i][j]).powf(p) - 1.0);
            }
        }
        v
    }

    fn check(&self) -> Result<Vec<Vec<f64>>, ModelError> {
        let d = self.b.len();
        if d == 0 {
            return Err(ModelError::Empty);
        }
        let shape = |field, got| {
            if got != d {
                Err(ModelError::ShapeMismatch {
                    field,
                    expected: d,
                    got,
                })
            } else {
                Ok(())
            }
        };
        shape("sigma", self.sigma.len())?;
        shape("lambda", self.lambda.len())?;
        shape("q", self.q.len())?;
        shape("gamma", self.gamma.len())?;
        for row in &self.q {
            shape("q row", row.len())?;
        }
        for row in &self.gamma {
            shape("gamma row", row.len())?;
        }

        for i in 0..d {
            if !self.b[i].is_finite() {
                return Err(ModelError::InvalidDrift {
                    regime: i,
                    value: self.b[i],
                });
            }
            if !(self.sigma[i].is_finite() && self.sigma[i] >= 0.0) {
                return Err(ModelError::InvalidVolatility {
                    regime: i,
                    value: self.sigma[i],
                });
            }
            if !(self.lambda[i].is_finite() && self.lambda[i] > 0.0) {
                return Err(ModelError::InvalidIntensity {
                    regime: i,
                    value: self.lambda[i],
                });
            }
        }

        // Only the off-diagonal rates are physical: the diagonal is rebuilt
        // from them so that every row sums to zero.
        let mut q = self.q.clone();
        for i in 0..d {
            let mut off = 0.0;
            for j in 0..d {
                let v = self.q[i][j];
                if !v.is_finite() {
                    return Err(ModelError::InvalidGenerator {
                        row: i,
                        col: j,
                        value: v,
                        reason: "not finite",
                    });
                }
                if j != i {
                    if v < 0.0 {
                        return Err(ModelError::InvalidGenerator {
                            row: i,
                            col: j,
                            value: v,
                            reason: "off-diagonal rates must be nonnegative",
                        });
                    }
                    off += v;
                }
            }
            if (self.q[i][i] + off).abs() > GENERATOR_ROW_TOL * (1.0 + off) {
                return Err(ModelError::InvalidGenerator {
                    row: i,
                    col: i,
                    value: self.q[i][i],
                    reason: "row does not sum to zero",
                });
            }
            q[i][i] = -off;
        }

        for i in 0..d {
            for j in 0..d {
                let g = self.gamma[i][j];
                let ok = if i == j { g == 0.0 } else { g.is_finite() && g < 1.0 };
                if !ok {
                    return Err(ModelError::InvalidGamma {
                        row: i,
                        col: j,
                        value: g,
                    });
                }
            }
        }
        Ok(q)
    }
}

/// Power utility `U(x) = x^p / p` with discount rate `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrraParams {
    pub p: f64,
    pub rho: f64,
}

impl CrraParams {
    pub fn new(p: f64, rho: f64) -> Self {
        Self { p, rho }
    }

    pub fn utility(&self, x: f64) -> f64 {
        x.powf(self.p) / self.p
    }

    /// Exponent `-p/(1-p)` of the consumption nonlinearity.
    pub fn dual_exponent(&self) -> f64 {
        -self.p / (1.0 - self.p)
    }
}

/// Convex conjugate `sup_{x>=0} [x^p/p - x ell]` of the power utility.
pub fn dual_utility(ell: f64, p: f64) -> Result<f64, ModelError> {
    if !(ell > 0.0) {
        return Err(ModelError::NonpositiveArgument(ell));
    }
    Ok((1.0 - p) / p * ell.powf(-p / (1.0 - p)))
}

/// Result of the growth-constant maximisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthRate {
    pub k: f64,
    /// Regime attaining the maximum (lowest index on ties).
    pub regime: usize,
    /// Maximising stock proportion in that regime.
    pub z_star: f64,
}

/// Growth constant `k(p)`: the maximum over regimes and `z in [0,1]` of
/// `p b z - sigma^2 p (1-p) z^2 / 2 + sum_j q_ij ((1 - z gamma_ij)^p - 1)`.
///
/// The objective can be multimodal once jump terms are present, so each
/// regime is scanned on a 1e-3 grid and the best cell is refined by
/// golden-section search.
pub fn growth_rate_k(model: &MarketModel, p: f64) -> GrowthRate {
    let mut best = GrowthRate {
        k: f64::NEG_INFINITY,
        regime: 0,
        z_star: 0.0,
    };
    for i in 0..model.regimes() {
        let (z, v) = maximize_on_unit(|z| model.growth_objective(i, p, z));
        if v > best.k {
            best = GrowthRate {
                k: v,
                regime: i,
                z_star: z,
            };
        }
    }
    best
}

fn maximize_on_unit(f: impl Fn(f64) -> f64) -> (f64, f64) {
    let n = (1.0 / K_SCAN_STEP).round() as usize;
    let mut arg = 0usize;
    let mut fmax = f(0.0);
    for k in 1..=n {
        let v = f(k as f64 / n as f64);
        if v > fmax {
            fmax = v;
            arg = k;
        }
    }
    let lo = arg.saturating_sub(1) as f64 / n as f64;
    let hi = (arg + 1).min(n) as f64 / n as f64;
    let (z, v) = golden_section_max(&f, lo, hi, K_GOLDEN_TOL);
    if v >= fmax {
        (z, v)
    } else {
        (arg as f64 / n as f64, fmax)
    }
}

fn golden_section_max(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    // the endpoints matter when the maximum sits on the boundary of [0,1]
    [(a, f(a)), (b, f(b)), (c, fc), (d, fd)]
        .into_iter()
        .fold((a, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
}

/// A market model paired with preferences that passed every admissibility
/// check, including `rho > k(p)`. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedModel {
    model: MarketModel,
    prefs: CrraParams,
    growth: GrowthRate,
}

impl ValidatedModel {
    pub fn model(&self) -> &MarketModel {
        &self.model
    }
    pub fn prefs(&self) -> CrraParams {
        self.prefs
    }
    pub fn growth(&self) -> GrowthRate {
        self.growth
    }
    pub fn regimes(&self) -> usize {
        self.model.regimes()
    }
    pub fn q(&self, i: usize, j: usize) -> f64 {
        self.model.q[i][j]
    }
    pub fn lambda(&self, i: usize) -> f64 {
        self.model.lambda[i]
    }
    pub fn b(&self, i: usize) -> f64 {
        self.model.b[i]
    }
    pub fn sigma(&self, i: usize) -> f64 {
        self.model.sigma[i]
    }
    pub fn gamma(&self, i: usize, j: usize) -> f64 {
        self.model.gamma[i][j]
    }
    /// Total event rate `-q_ii + lambda_i` out of regime `i`.
    pub fn event_rate(&self, i: usize) -> f64 {
        -self.model.q[i][i] + self.model.lambda[i]
    }
}

pub fn validate_model(model: &MarketModel, prefs: CrraParams) -> Result<ValidatedModel, ModelError> {
    let q = model.check()?;
    if !(prefs.p > 0.0 && prefs.p < 1.0) {
        return Err(ModelError::InvalidExponent(prefs.p));
    }
    let model = MarketModel { q, ..model.clone() };
    let growth = growth_rate_k(&model, prefs.p);
    if !(prefs.rho > growth.k) {
        return Err(ModelError::DiscountTooSmall {
            rho: prefs.rho,
            k: growth.k,
        });
    }
    Ok(ValidatedModel {
        model,
        prefs,
        growth,
    })
}
