use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tracedyn::collapse::{lindblad_evolve, sde_step, CollapseConfig, StateVector};
use tracedyn::dynamics::{advance, charge_ctilde, random_hamiltonian, Flow};
use tracedyn::ensemble::{Ensemble, EnsembleParams};
use tracedyn::matrix::{random_complex, random_hermitian, random_unitary};
use tracedyn::trace::{poisson_bracket, trace_eval, Letter};
use tracedyn::{eff_project, i_eff, Kind, MatrixValue, PhaseState, Registry, Roster, TracePolynomial, TraceWord, VariableSpec};

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn random_poly(labels: &[&str], rng: &mut ChaCha8Rng) -> TracePolynomial {
    let words = (0..rng.random_range(1..=3))
        .map(|_| {
            let letters = (0..rng.random_range(1..=4))
                .map(|_| {
                    let l = labels[rng.random_range(0..labels.len())];
                    if rng.random_bool(0.5) {
                        Letter::q(l)
                    } else {
                        Letter::p(l)
                    }
                })
                .collect();
            TraceWord::new(Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)), letters)
        })
        .collect();
    TracePolynomial::new(words).unwrap()
}

fn mixed_state(dim: usize, generators: u32, rng: &mut ChaCha8Rng) -> PhaseState {
    let roster = Arc::new(Roster::new(vec![VariableSpec::bosonic("b"), VariableSpec::fermionic("f")]).unwrap());
    PhaseState::random(roster, dim, generators, 0.6, rng).unwrap()
}

fn bosons(dim: usize, rng: &mut ChaCha8Rng) -> PhaseState {
    PhaseState::random(Arc::new(Roster::bosonic(&["1", "2"]).unwrap()), dim, 0, 0.7, rng).unwrap()
}

fn block_unitary(half: usize, rng: &mut ChaCha8Rng) -> MatrixValue {
    let (a, b) = (random_unitary(half, rng), random_unitary(half, rng));
    let n = 2 * half;
    let mut rows = vec![c(0.0); n * n];
    for i in 0..half {
        for j in 0..half {
            rows[i * n + j] = a.body_entry(i, j);
            rows[(i + half) * n + j + half] = b.body_entry(i, j);
        }
    }
    MatrixValue::from_rows(n, &rows)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn unitary_conjugation_preserves_trace_polynomials(seed in any::<u64>(), dim in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = mixed_state(dim, 4, &mut rng);
        let poly = random_poly(&["b", "f"], &mut rng);
        let u = random_unitary(dim, &mut rng);
        let reg = Registry::new();
        let before = trace_eval(&poly, &s, &reg).unwrap();
        let after = trace_eval(&poly, &s.apply_unitary(&u).unwrap(), &reg).unwrap();
        prop_assert!((&before - &after).norm() < 1e-10 * before.norm().max(1.0));
    }

    #[test]
    fn eff_projection_splits_commuting_and_anticommuting_parts(seed in any::<u64>(), half in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_complex(2 * half, 1.0, &mut rng);
        let ie = i_eff(2 * half).unwrap();
        let e = eff_project(&m).unwrap();
        prop_assert!(eff_project(&e).unwrap().try_sub(&e).unwrap().norm() < 1e-12);
        prop_assert!(e.commutator(&ie).unwrap().norm() < 1e-12);
        let rest = m.try_sub(&e).unwrap();
        prop_assert!(rest.anticommutator(&ie).unwrap().norm() < 1e-12);
    }

    #[test]
    fn adjoint_reverses_bosonic_products(seed in any::<u64>(), dim in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_complex(dim, 1.0, &mut rng);
        let b = random_complex(dim, 1.0, &mut rng);
        let lhs = a.try_mul(&b).unwrap().adjoint();
        let rhs = b.adjoint().try_mul(&a.adjoint()).unwrap();
        prop_assert!(lhs.try_sub(&rhs).unwrap().norm() < 1e-12);
    }

    #[test]
    fn bracket_is_antisymmetric(seed in any::<u64>(), dim in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = bosons(dim, &mut rng);
        let a = random_poly(&["1", "2"], &mut rng);
        let b = random_poly(&["1", "2"], &mut rng);
        let reg = Registry::new();
        let ab = poisson_bracket(&a, &b, &s, &reg).unwrap();
        let ba = poisson_bracket(&b, &a, &s, &reg).unwrap();
        prop_assert!((&ab + &ba).norm() < 1e-10 * ab.norm().max(1.0));
    }

    #[test]
    fn flow_of_a_differentiates_b_by_the_bracket(seed in any::<u64>(), dim in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = bosons(dim, &mut rng);
        let a = random_poly(&["1", "2"], &mut rng).hermitian_part(s.roster()).unwrap();
        let b = random_poly(&["1", "2"], &mut rng);
        let reg = Registry::new();
        let field = Flow::new(&a, s.roster(), &reg, dim).unwrap().field(&s).unwrap();
        let h = 1e-5;
        let at = |eps: f64| trace_eval(&b, &advance(&s, &field, eps).unwrap(), &reg).unwrap().body();
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let bracket = poisson_bracket(&b, &a, &s, &reg).unwrap().body();
        prop_assert!((fd - bracket).norm() < 1e-5 * bracket.norm().max(1.0), "{} vs {}", fd, bracket);
    }

    #[test]
    fn ctilde_is_traceless_and_anti_self_adjoint(seed in any::<u64>(), dim in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = mixed_state(dim, 6, &mut rng);
        let ct = charge_ctilde(&s).unwrap();
        prop_assert!(ct.trace().norm() < 1e-12);
        prop_assert!(ct.try_add(&ct.adjoint()).unwrap().norm() < 1e-10);
    }

    #[test]
    fn energy_is_real_for_random_hamiltonians(seed in any::<u64>(), dim in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = mixed_state(dim, 4, &mut rng);
        let h = random_hamiltonian(s.roster(), 4, 3, 0.4, &mut rng).unwrap();
        let e = trace_eval(&h, &s, &Registry::new()).unwrap();
        prop_assert!(e.body().im.abs() < 1e-12 * e.body().norm().max(1.0));
    }

    #[test]
    fn log_weight_is_eff_unitary_invariant(seed in any::<u64>(), half in 1usize..=2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 2 * half;
        let s = bosons(dim, &mut rng);
        let roster = Arc::new(s.roster().clone());
        let h = random_hamiltonian(&roster, 4, 2, 0.3, &mut rng).unwrap();
        let params = EnsembleParams::new(0.8, 0.0, 0.4, dim, roster).unwrap();
        let ens = Ensemble::new(&h, params, &Registry::new()).unwrap();
        let u = block_unitary(half, &mut rng);
        let a = ens.log_weight(&s).unwrap();
        let b = ens.log_weight(&s.apply_unitary(&u).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn lindblad_keeps_trace_and_positivity(seed in any::<u64>(), d in 2usize..=4, gamma in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_hermitian(d, 1.0, &mut rng).to_dmatrix();
        let cfg = CollapseConfig::energy_driven(h, gamma).unwrap();
        let z = random_complex(d, 1.0, &mut rng).to_dmatrix();
        let rho = &z * z.adjoint();
        let rho0: DMatrix<Complex64> = &rho / rho.trace();
        let rho = lindblad_evolve(&rho0, &cfg, 1.0, 1.0).unwrap();
        prop_assert!((rho.trace() - c(1.0)).norm() < 1e-9);
        prop_assert!(rho.symmetric_eigen().eigenvalues.min() >= -1e-10);
    }

    #[test]
    fn completed_step_is_normalized(seed in any::<u64>(), d in 2usize..=4, dw in -0.05f64..0.05) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_hermitian(d, 1.0, &mut rng).to_dmatrix();
        let cfg = CollapseConfig::energy_driven(h, 1.0).unwrap();
        let amps: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let psi = StateVector::from_real(&amps, 1.0).unwrap();
        let next = sde_step(&psi, &cfg, 1e-4, &[dw]).unwrap();
        prop_assert!((next.norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn derivative_matches_central_differences_at_small_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let reg = Registry::new();
    for _ in 0..20 {
        let dim = rng.random_range(1..=3);
        let s = bosons(dim, &mut rng);
        let poly = random_poly(&["1", "2"], &mut rng);
        for (label, kind) in [("1", Kind::Q), ("2", Kind::P)] {
            let d = tracedyn::trace::trace_derivative(&poly, (label, kind), s.roster()).unwrap().eval(&s, &reg).unwrap();
            for i in 0..dim {
                for j in 0..dim {
                    for dir in [c(1.0), Complex64::new(0.0, 1.0)] {
                        let mut e = vec![c(0.0); dim * dim];
                        e[j * dim + i] = dir;
                        let e = MatrixValue::from_rows(dim, &e);
                        let h = 1e-6;
                        let shifted = |sgn: f64| {
                            let mut t = s.clone();
                            let x = t.get(label, kind).unwrap().try_axpy(c(sgn * h), &e).unwrap();
                            t.set(label, kind, x).unwrap();
                            trace_eval(&poly, &t, &reg).unwrap().body()
                        };
                        let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
                        assert!((fd - d.body_entry(i, j) * dir).norm() < 1e-6);
                    }
                }
            }
        }
    }
}
