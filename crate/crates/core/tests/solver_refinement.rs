use illiquid_core::solver::{boundary_solve_z0, hjb_residual_at};
use illiquid_core::{
    hjb_residual, liquidity_cost, merton_single, solve_phi, validate_model, CrraParams, GridConfig, MarketModel,
    ValidatedModel,
};

fn single(lambda: f64) -> ValidatedModel {
    validate_model(&MarketModel::single(0.4, 1.0, lambda), CrraParams::new(0.5, 0.2)).unwrap()
}

#[test]
fn residual_falls_fourfold_per_halving_near_the_liquid_limit() {
    // contraction is about lambda / (rho + lambda), so this needs ~1e5 outer steps
    let model = single(1e3);
    let residuals: Vec<f64> = [201, 401, 801]
        .iter()
        .map(|&n| {
            let cfg = GridConfig {
                tol_outer: 1e-13,
                max_outer: 200_000,
                ..GridConfig::with_points(n)
            };
            let sol = solve_phi(&model, &cfg).unwrap();
            hjb_residual(&sol, &model, 500, 1).max
        })
        .collect();
    for w in residuals.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.5..=4.5).contains(&ratio), "{residuals:?}");
    }
}

#[test]
fn residual_is_scale_free() {
    let model = single(1.0);
    let sol = solve_phi(&model, &GridConfig::with_points(801)).unwrap();
    for (x, y) in [(0.3, 0.7), (1.2, 0.4), (0.05, 2.0)] {
        let a = hjb_residual_at(&sol, &model, 0, x, y);
        let b = hjb_residual_at(&sol, &model, 0, 2.0 * x, 2.0 * y);
        // finite-difference cancellation leaves roughly 1e-10 of noise
        assert!((a - b).abs() <= 1e-9 + 1e-6 * a, "{a} {b}");
    }
}

#[test]
fn rare_trading_leaves_pure_consumption() {
    let model = single(1e-6);
    let sol = solve_phi(&model, &GridConfig::with_points(401)).unwrap();
    let phi0 = boundary_solve_z0(0.0, 0, &model);
    assert!((phi0 - 2.5f64.sqrt()).abs() < 1e-5);
    assert!((sol.max_phi(0).1 - sol.phi[0][0]).abs() < 1e-3);
}

#[test]
fn increments_decay_geometrically() {
    for lambda in [1.0, 5.0, 10.0] {
        let sol = solve_phi(&single(lambda), &GridConfig::with_points(801)).unwrap();
        let h = &sol.history;
        for w in h[h.len() - 11..].windows(2) {
            assert!(w[1] / w[0] <= sol.contraction + 0.05, "lambda {lambda}: {:?}", &h[h.len() - 11..]);
        }
        assert!(sol.contraction < 1.0);
    }
}

#[test]
fn cost_falls_and_value_rises_with_liquidity() {
    let bench = merton_single(0.4, 1.0, CrraParams::new(0.5, 0.2)).unwrap();
    let mut prev_cost = f64::INFINITY;
    let mut prev_top = 0.0;
    for lambda in [0.5, 1.0, 2.0, 5.0, 10.0, 20.0] {
        let model = single(lambda);
        let sol = solve_phi(&model, &GridConfig::with_points(801)).unwrap();
        let cost = liquidity_cost(&sol, &bench, model.prefs()).cost[0];
        let top = sol.max_phi(0).1;
        assert!(cost < prev_cost && cost > 0.0, "lambda {lambda}: {cost}");
        assert!(top > prev_top && top < bench.phi_m[0]);
        for &v in &sol.phi[0] {
            assert!(v <= bench.phi_m[0] + 1e-8);
        }
        prev_cost = cost;
        prev_top = top;
    }
}

#[test]
fn liquidity_shocks_lower_the_value() {
    let market = |gamma: f64| MarketModel {
        q: vec![vec![-1.0, 1.0], vec![1.0, -1.0]],
        lambda: vec![1.0, 1.0],
        b: vec![0.4, 0.4],
        sigma: vec![1.0, 2.0],
        gamma: vec![vec![0.0, gamma], vec![gamma, 0.0]],
    };
    let prefs = CrraParams::new(0.5, 0.2);
    let calm = solve_phi(&validate_model(&market(0.0), prefs).unwrap(), &GridConfig::with_points(401)).unwrap();
    let shock = solve_phi(&validate_model(&market(0.3), prefs).unwrap(), &GridConfig::with_points(401)).unwrap();
    for i in 0..2 {
        // stock bought later is still exposed, so even z = 0 loses value
        for (s, c) in shock.phi[i].iter().zip(&calm.phi[i]) {
            assert!(s <= c);
        }
        assert!(shock.max_phi(i).1 < calm.max_phi(i).1);
        assert!(shock.phi[i][400] < calm.phi[i][400]);
    }
    assert!(shock.concavity_excess() <= 1e-8);
}
