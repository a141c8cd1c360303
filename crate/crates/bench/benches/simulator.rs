use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use illiquid_bench::single_regime;
use illiquid_core::{extract_policy, simulate_value, solve_phi, GridConfig, InitialState, SimConfig};

fn paths(c: &mut Criterion) {
    let model = single_regime(1.0, 1.0);
    let sol = solve_phi(&model, &GridConfig::default()).unwrap();
    let policy = extract_policy(&sol, model.prefs()).unwrap();
    let init = InitialState::new(0, 1.0, policy.pi_star[0]);
    let cfg = SimConfig {
        n_paths: 256,
        horizon: 10.0,
        dt: 1e-3,
        ..SimConfig::default()
    };
    let mut group = c.benchmark_group("simulate_value");
    group.sample_size(10);
    // time steps per iteration
    group.throughput(Throughput::Elements((cfg.n_paths as f64 * cfg.horizon / cfg.dt) as u64));
    group.bench_function("256_paths_T10", |b| b.iter(|| simulate_value(&model, &policy, init, &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, paths);
criterion_main!(benches);
