mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use sparsesem::admm::{
    cross_validate_lambda, delta_update, delta_update_direct, fit_sem, lambda_grid, lambda_max, penalized_objective,
    soft_threshold_scalar, solve_system, system_lambda_max,
};
use sparsesem::model::{assemble_equation, two_stage_explicit, two_stage_from_system, two_stage_least_squares, CrossProducts};
use sparsesem::{AdmmSettings, ExogenousMatrix, PhenotypeMatrix};

fn tight(lambda: f64) -> AdmmSettings {
    AdmmSettings {
        lambda,
        tol_primal: 1e-10,
        tol_dual: 1e-10,
        max_iter: 200_000,
        ..AdmmSettings::default()
    }
}

#[test]
fn admm_matches_coordinate_descent() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let (y, x) = random_sem(&mut r, 200, 3, 10);
        let cross = CrossProducts::new(&y, &x).unwrap();
        for i in 0..3 {
            let sys = cross.system(i).unwrap();
            for frac in [0.02, 0.1, 0.4] {
                let lambda = frac * lambda_max(&sys);
                let admm = solve_system(&sys, &AdmmSettings::default().with_lambda(lambda), None).unwrap();
                let cd = coordinate_descent(&sys.a, &sys.c, lambda, 1e-10);
                let f_admm = penalized_objective(&sys, &admm.coefficients, lambda);
                let f_cd = penalized_objective(&sys, &cd, lambda);
                assert!(
                    rel_diff(f_admm, f_cd) < 1e-4,
                    "seed {seed} eq {i} frac {frac}: {f_admm} vs {f_cd}"
                );
            }
        }
    }
}

#[test]
fn lambda_at_or_above_max_gives_exact_zero() {
    let mut r = rng(3);
    let (y, x) = random_sem(&mut r, 150, 3, 8);
    let cross = CrossProducts::new(&y, &x).unwrap();
    for i in 0..3 {
        let sys = cross.system(i).unwrap();
        let lmax = lambda_max(&sys);
        for lambda in [lmax, 1.5 * lmax] {
            let sol = solve_system(&sys, &AdmmSettings::default().with_lambda(lambda), None).unwrap();
            assert!(sol.coefficients.iter().all(|&v| v == 0.0), "{:?}", sol.coefficients);
        }
        let below = solve_system(&sys, &AdmmSettings::default().with_lambda(0.9 * lmax), None).unwrap();
        assert!(below.coefficients.iter().any(|&v| v != 0.0));
    }
}

fn identified_equation(seed: u64) -> (sparsesem::EquationView, ExogenousMatrix) {
    let mut r = rng(seed);
    let (y, x) = random_sem(&mut r, 300, 3, 10);
    let eq = assemble_equation(&y, &x, 2).unwrap();
    // phenotypes 0, 1 and the first four exogenous columns; six excluded instruments
    (eq.restrict(&[0, 1, 2, 3, 4, 5]), x)
}

#[test]
fn zero_lambda_reproduces_two_stage() {
    for seed in 0..5 {
        let (eq, x) = identified_equation(seed);
        let sys = sparsesem::model::ProjectedSystem::new(&eq, x.values()).unwrap();
        let tsls = two_stage_from_system(&sys).unwrap();
        let sol = solve_system(&sys, &tight(0.0), None).unwrap();
        for (a, b) in sol.coefficients.iter().zip(tsls.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn gls_form_equals_explicit_first_stage() {
    for seed in 0..5 {
        let (eq, x) = identified_equation(seed);
        let a = two_stage_least_squares(&eq, &x).unwrap();
        let b = two_stage_explicit(&eq, &x).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() <= 1e-8 * v.abs().max(1.0), "{u} vs {v}");
        }
    }
}

#[test]
fn unrestricted_system_is_not_identified() {
    let mut r = rng(11);
    let (y, x) = random_sem(&mut r, 200, 3, 6);
    let eq = assemble_equation(&y, &x, 0).unwrap();
    assert!(two_stage_least_squares(&eq, &x).is_err());
}

#[test]
fn exogenous_permutation_permutes_estimates() {
    let mut r = rng(5);
    let (y, x) = random_sem(&mut r, 250, 3, 8);
    let perm = [3, 0, 7, 5, 1, 6, 2, 4];
    let xp = DMatrix::from_fn(x.n(), 8, |i, c| x.values()[(i, perm[c])]);
    let names = perm.iter().map(|&c| x.names()[c].clone()).collect();
    let xp = ExogenousMatrix::new(xp, names).unwrap();
    let settings = tight(0.05 * system_lambda_max(&y, &x).unwrap());
    let a = fit_sem(&y, &x, &settings).unwrap().fit;
    let b = fit_sem(&y, &xp, &settings).unwrap().fit;
    for i in 0..3 {
        for c in 0..8 {
            assert!((b.beta[(c, i)] - a.beta[(perm[c], i)]).abs() < 1e-6);
        }
        for j in 0..3 {
            assert!((b.gamma[(j, i)] - a.gamma[(j, i)]).abs() < 1e-6);
        }
    }
}

#[test]
fn trait_scaling_is_absorbed_by_lambda() {
    // single trait: Δ(sλ; s y) = s Δ(λ; y)
    let mut r = rng(9);
    let (y, x) = random_sem(&mut r, 200, 1, 6);
    let s = 3.0;
    let ys = PhenotypeMatrix::new(y.values() * s, y.names().to_vec()).unwrap();
    let lambda = 0.1 * system_lambda_max(&y, &x).unwrap();
    let a = fit_sem(&y, &x, &tight(lambda)).unwrap().fit;
    let b = fit_sem(&ys, &x, &tight(s * lambda)).unwrap().fit;
    for c in 0..6 {
        assert!((b.beta[(c, 0)] - s * a.beta[(c, 0)]).abs() < 1e-6);
    }
}

#[test]
fn warm_start_reaches_cold_solution() {
    let mut r = rng(21);
    let (y, x) = random_sem(&mut r, 200, 3, 10);
    let cross = CrossProducts::new(&y, &x).unwrap();
    let sys = cross.system(1).unwrap();
    let lmax = lambda_max(&sys);
    let first = solve_system(&sys, &tight(0.3 * lmax), None).unwrap();
    let warm = solve_system(&sys, &tight(0.1 * lmax), Some((&first.state.z, &first.state.u))).unwrap();
    let cold = solve_system(&sys, &tight(0.1 * lmax), None).unwrap();
    assert!(rel_diff(warm.objective, cold.objective) < 1e-8);
}

#[test]
fn cross_validation_is_reproducible() {
    let mut r = rng(4);
    let (y, x) = random_sem(&mut r, 200, 3, 8);
    let grid = lambda_grid(system_lambda_max(&y, &x).unwrap(), 12);
    let a = cross_validate_lambda(&y, &x, &grid, 5, 17, &AdmmSettings::default()).unwrap();
    let b = cross_validate_lambda(&y, &x, &grid, 5, 17, &AdmmSettings::default()).unwrap();
    assert_eq!(a.lambda, b.lambda);
    assert_eq!(a.curve.len(), 12);
    for (p, q) in a.curve.iter().zip(&b.curve) {
        assert_eq!(p.error.to_bits(), q.error.to_bits());
    }
    let best = a.curve.iter().map(|p| p.error).fold(f64::INFINITY, f64::min);
    let chosen = a.curve.iter().find(|p| p.lambda == a.lambda).unwrap();
    assert_eq!(chosen.error, best);
}

#[test]
fn grid_is_log_spaced_and_descending() {
    let g = lambda_grid(5.0, 50);
    assert_eq!(g.len(), 50);
    assert!((g[0] - 5.0).abs() < 1e-12);
    assert!((g[49] - 5e-3).abs() < 1e-12);
    let ratio = g[1] / g[0];
    for w in g.windows(2) {
        assert!((w[1] / w[0] - ratio).abs() < 1e-12);
    }
}

fn instance(seed: u64) -> (sparsesem::model::ProjectedSystem, DVector<f64>, DVector<f64>) {
    let mut r = rng(seed);
    let (y, x) = random_sem(&mut r, 120, 3, 7);
    let sys = CrossProducts::new(&y, &x).unwrap().system((seed % 3) as usize).unwrap();
    let p = sys.dim();
    let z = DVector::from_fn(p, |_, _| normal(&mut r));
    let u = DVector::from_fn(p, |_, _| normal(&mut r));
    (sys, z, u)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn woodbury_update_matches_direct(seed in 0u64..10_000, log_rho in -2.0f64..3.0) {
        let (sys, z, u) = instance(seed);
        let rho = 10f64.powf(log_rho);
        let (w, _) = delta_update(&sys, &z, &u, rho).unwrap();
        let d = delta_update_direct(&sys, &z, &u, rho).unwrap();
        prop_assert!((&w - &d).norm() <= 1e-8 * d.norm().max(1.0));
    }

    #[test]
    fn soft_threshold_shrinks_toward_zero(x in -100.0f64..100.0, k in 0.0f64..50.0) {
        let s = soft_threshold_scalar(x, k);
        prop_assert!(s.abs() <= x.abs());
        prop_assert!(s == 0.0 || s.signum() == x.signum());
        prop_assert_eq!(s == 0.0, x.abs() <= k);
        prop_assert!((x.abs() - s.abs() - k.min(x.abs())).abs() < 1e-12);
    }

    #[test]
    fn solution_never_worse_than_zero(seed in 0u64..500, frac in 0.01f64..1.0) {
        let (sys, _, _) = instance(seed);
        let lambda = frac * lambda_max(&sys);
        let sol = solve_system(&sys, &AdmmSettings::default().with_lambda(lambda), None).unwrap();
        let zero = DVector::zeros(sys.dim());
        prop_assert!(sol.objective <= penalized_objective(&sys, &zero, lambda) * (1.0 + 1e-9));
    }
}
