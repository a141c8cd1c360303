//! Shared fixtures for the benchmarks.

use illiquid_core::{validate_model, CrraParams, MarketModel, ValidatedModel};

/// Single regime with `b = 0.4`, `p = 0.5`, `rho = 0.2`.
pub fn single_regime(sigma: f64, lambda: f64) -> ValidatedModel {
    validate_model(&MarketModel::single(0.4, sigma, lambda), CrraParams::new(0.5, 0.2)).expect("valid model")
}

/// Two regimes with unit switching rates and the given volatilities.
pub fn two_regime(lambda: f64) -> ValidatedModel {
    let m = MarketModel {
        q: vec![vec![-1.0, 1.0], vec![1.0, -1.0]],
        lambda: vec![lambda; 2],
        b: vec![0.4, 0.4],
        sigma: vec![1.0, 2.0],
        gamma: vec![vec![0.0; 2]; 2],
    };
    validate_model(&m, CrraParams::new(0.5, 0.2)).expect("valid model")
}
