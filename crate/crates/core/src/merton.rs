//! Perfectly liquid (Merton) benchmarks.
//!
//! With continuous trading the value in regime `i` is `U(r) phi_i` where the
//! constants solve
//! `(rho - q_ii - b_i^2 p / (2 sigma_i^2 (1-p))) phi_i - (1-p) phi_i^{-p/(1-p)} = sum_{j != i} q_ij phi_j`.
//! Liquidity shocks are ignored by the benchmark.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CrraParams, ValidatedModel};

const MAX_NEWTON: usize = 200;
const MAX_HALVINGS: usize = 30;
const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MertonError {
    #[error("volatility of regime {regime} is zero; the Merton proportion is undefined")]
    ZeroVolatility { regime: usize },
    #[error("effective discount {effective} is not positive; the liquid problem is ill-posed")]
    IllPosed { effective: f64 },
    #[error("Merton system did not converge after {iterations} Newton steps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("Newton damping could not keep the Merton iterate positive")]
    NonpositiveIterate,
    #[error("singular Jacobian in the Merton system")]
    SingularJacobian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MertonSolution {
    pub phi_m: Vec<f64>,
    /// Unconstrained optimal proportions `b_i / ((1-p) sigma_i^2)`; may leave [0,1].
    pub pi_m: Vec<f64>,
    pub c_m: Vec<f64>,
    pub residual: f64,
}

fn risk_premium_term(b: f64, sigma: f64, p: f64) -> f64 {
    b * b * p / (2.0 * sigma * sigma * (1.0 - p))
}

/// Closed-form single-regime benchmark.
pub fn merton_single(b: f64, sigma: f64, prefs: CrraParams) -> Result<MertonSolution, MertonError> {
    if !(sigma > 0.0) {
        return Err(MertonError::ZeroVolatility { regime: 0 });
    }
    let p = prefs.p;
    let effective = prefs.rho - risk_premium_term(b, sigma, p);
    if !(effective > 0.0) {
        return Err(MertonError::IllPosed { effective });
    }
    let phi = ((1.0 - p) / effective).powf(1.0 - p);
    let residual = (effective * phi - (1.0 - p) * phi.powf(-p / (1.0 - p))).abs();
    Ok(MertonSolution {
        phi_m: vec![phi],
        pi_m: vec![b / ((1.0 - p) * sigma * sigma)],
        c_m: vec![phi.powf(-1.0 / (1.0 - p))],
        residual,
    })
}

/// Coupled multi-regime benchmark, solved by damped Newton started from the
/// decoupled single-regime values.
pub fn merton_multi(model: &ValidatedModel) -> Result<MertonSolution, MertonError> {
    let d = model.regimes();
    let prefs = model.prefs();
    let p = prefs.p;
    let mut diag = vec![0.0; d];
    let mut pi_m = vec![0.0; d];
    for i in 0..d {
        let s = model.sigma(i);
        if !(s > 0.0) {
            return Err(MertonError::ZeroVolatility { regime: i });
        }
        diag[i] = prefs.rho - model.q(i, i) - risk_premium_term(model.b(i), s, p);
        pi_m[i] = model.b(i) / ((1.0 - p) * s * s);
    }

    let residual_of = |phi: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|i| {
                let coupling: f64 = (0..d).filter(|&j| j != i).map(|j| model.q(i, j) * phi[j]).sum();
                diag[i] * phi[i] - (1.0 - p) * phi[i].powf(-p / (1.0 - p)) - coupling
            })
            .collect()
    };
    let sup = |r: &[f64]| r.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    let mut phi: Vec<f64> = (0..d)
        .map(|i| match merton_single(model.b(i), model.sigma(i), prefs) {
            Ok(s) => s.phi_m[0],
            Err(_) => 1.0,
        })
        .collect();
    let mut res = residual_of(&phi);
    let mut norm = sup(&res);

    let mut iter = 0;
    while norm >= RESIDUAL_TOL * 1e-2 {
        if iter == MAX_NEWTON {
            if norm < RESIDUAL_TOL {
                break;
            }
            return Err(MertonError::NoConvergence {
                iterations: iter,
                residual: norm,
            });
        }
        iter += 1;
        let jac = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                diag[i] + p * phi[i].powf(-1.0 / (1.0 - p))
            } else {
                -model.q(i, j)
            }
        });
        let step = jac
            .lu()
            .solve(&DVector::from_iterator(d, res.iter().map(|r| -r)))
            .ok_or(MertonError::SingularJacobian)?;

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = (0..d).map(|i| phi[i] + alpha * step[i]).collect();
            if trial.iter().all(|&x| x > 0.0) {
                let r = residual_of(&trial);
                let n = sup(&r);
                if n < norm || n < RESIDUAL_TOL * 1e-2 {
                    phi = trial;
                    res = r;
                    norm = n;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            if phi.iter().all(|&x| x > 0.0) && norm < RESIDUAL_TOL {
                break;
            }
            return Err(MertonError::NonpositiveIterate);
        }
    }

    Ok(MertonSolution {
        c_m: phi.iter().map(|x| x.powf(-1.0 / (1.0 - p))).collect(),
        phi_m: phi,
        pi_m,
        residual: norm,
    })
}
