use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use tracedyn::collapse::{run_trajectories, CollapseConfig, RunConfig, StateVector};
use tracedyn::ensemble::{mcmc_sample, Ensemble, EnsembleParams, McmcConfig};
use tracedyn::{Execution, Registry, Roster, TracePolynomial};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn trajectories(c: &mut Criterion) {
    let h = DMatrix::from_diagonal(&DVector::from_vec(vec![Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)]));
    let cfg = CollapseConfig::energy_driven(h, 5.0).unwrap();
    let psi = StateVector::from_real(&[0.6, 0.8], 1.0).unwrap();
    let mut group = c.benchmark_group("collapse_trajectories");
    group.sample_size(10);
    for (name, execution) in MODES {
        let run = RunConfig {
            t_final: 1.0,
            dt: 1e-3,
            n_traj: 256,
            seed: 1,
            execution,
            ..Default::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_trajectories(&psi, &cfg, &run).unwrap())
        });
    }
    group.finish();
}

fn chains(c: &mut Criterion) {
    let roster = Arc::new(Roster::bosonic(&["1", "2"]).unwrap());
    let params = EnsembleParams::new(1.0, 0.0, 0.3, 2, roster).unwrap();
    let h = TracePolynomial::parse("tr(p1 p1) + tr(p2 p2) + tr(q1 q1) + tr(q2 q2) + 0.5 * tr(q1 q1 q2 q2)").unwrap();
    let ens = Ensemble::new(&h, params, &Registry::new()).unwrap();
    let mut group = c.benchmark_group("mcmc_chains");
    group.sample_size(10);
    for (name, execution) in MODES {
        let cfg = McmcConfig {
            n_samples: 20_000,
            burn_in: 1_000,
            chains: 4,
            execution,
            ..Default::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| mcmc_sample(&ens, &cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, trajectories, chains);
criterion_main!(benches);
