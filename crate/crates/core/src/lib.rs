//! Optimal consumption and investment in an illiquid regime-switching
//! market: the stock can be traded only at the jump times of a Cox process.
//!
//! Under CRRA utility the value reduces to one function `phi_i(z)` per
//! regime of the stock proportion `z`. [`solver`] computes it by a
//! frozen-nonlocal outer iteration, [`merton`] gives the liquid benchmark,
//! [`policy`] extracts feedback controls and the cost of liquidity, and
//! [`simulator`] checks the result by Monte Carlo.

pub mod io;
pub mod merton;
pub mod model;
pub mod policy;
pub mod simulator;
pub mod solver;
pub mod tridiag;

pub use merton::{merton_multi, merton_single, MertonError, MertonSolution};
pub use model::{validate_model, CrraParams, GrowthRate, MarketModel, ModelError, ValidatedModel};
pub use policy::{best_value, extract_policy, liquidity_cost, stage_policies, value_at, LiquidityCostReport, PolicyError, PolicyTable};
pub use simulator::{
    check_boundary_identity, check_supermartingale, simulate_trace, simulate_truncated, simulate_value,
    BoundaryIdentityReport, Diagnostics, InitialState, SimConfig, SimError, SimResult, SupermartingaleReport,
};
pub use solver::{hjb_residual, solve_phi, GridConfig, GridSolution, ResidualStats, SolverError};
