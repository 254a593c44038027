mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use sparsesem::inference::{
    coefficient_covariance, edge_tests, gene_path_test, infer_equation, single_path_test, stability_selection,
    ResampleScheme, StabilityConfig,
};
use sparsesem::model::{assemble_equation, residual_variance, CrossProducts};
use sparsesem::network::{estimate_network, singleton_groups, NetworkOptions};
use sparsesem::{AdmmSettings, ExogenousMatrix, PhenotypeMatrix, SourceGroup};

fn spd(r: &mut rand_chacha::ChaCha8Rng, g: usize) -> DMatrix<f64> {
    let a = normal_matrix(r, g, g);
    &a * a.transpose() + DMatrix::identity(g, g) * 0.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gene_statistic_is_invariant_under_congruence(seed in 0u64..100_000, g in 1usize..6) {
        let mut r = rng(seed);
        let lambda = spd(&mut r, g);
        let b = DVector::from_fn(g, |_, _| normal(&mut r));
        let mut t = normal_matrix(&mut r, g, g);
        while t.determinant().abs() < 0.1 {
            t = normal_matrix(&mut r, g, g);
        }
        let base = gene_path_test("g", &b, &lambda).unwrap();
        let moved = gene_path_test("g", &(&t * &b), &(&t * &lambda * t.transpose())).unwrap();
        prop_assert!(rel_diff(base.statistic, moved.statistic) < 1e-8);
        prop_assert_eq!(base.dof, g);
        prop_assert!((0.0..=1.0).contains(&base.p_value));
    }

    #[test]
    fn one_column_gene_test_is_single_test(delta in -5.0f64..5.0, var in 0.01f64..4.0) {
        let g = gene_path_test("g", &DVector::from_element(1, delta), &DMatrix::from_element(1, 1, var)).unwrap();
        let c = single_path_test("c", delta, var).unwrap();
        prop_assert!((g.statistic - c.statistic).abs() < 1e-12 * c.statistic.max(1.0));
        prop_assert!((g.p_value - c.p_value).abs() < 1e-12);
    }
}

#[test]
fn covariance_matches_explicit_first_stage() {
    let mut r = rng(4);
    let (y, x) = random_sem(&mut r, 200, 2, 6);
    let eq = assemble_equation(&y, &x, 1).unwrap().restrict(&[0, 1, 2]);
    let cov = coefficient_covariance(&eq, &x, 0.7).unwrap();
    let xv = x.values();
    let fitted = xv * (xv.transpose() * xv).try_inverse().unwrap() * xv.transpose() * &eq.regressors;
    let oracle = (fitted.transpose() * &fitted).try_inverse().unwrap() * 0.7;
    assert!((cov.matrix - &oracle).amax() < 1e-8 * oracle.amax());
}

fn null_data(seed: u64, n: usize, k: usize) -> (PhenotypeMatrix, ExogenousMatrix) {
    let mut r = rng(seed);
    let x = genotype_matrix(&mut r, n, k);
    let y = normal_matrix(&mut r, n, 2);
    (
        PhenotypeMatrix::new(y, vec!["a".into(), "b".into()]).unwrap(),
        ExogenousMatrix::new(x, (0..k).map(|c| format!("x{c}")).collect()).unwrap(),
    )
}

#[test]
fn null_refit_tests_are_calibrated() {
    let (reps, k) = (300, 6);
    let groups = vec![
        SourceGroup {
            name: "g1".into(),
            columns: 0..3,
        },
        SourceGroup {
            name: "g2".into(),
            columns: 3..6,
        },
    ];
    let mut small = [0usize; 2];
    let mut total = [0usize; 2];
    for rep in 0..reps {
        let (y, x) = null_data(1000 + rep, 400, k);
        let eq = assemble_equation(&y, &x, 0).unwrap();
        let sys = CrossProducts::new(&y, &x).unwrap().system(0).unwrap();
        let mut support = DVector::zeros(eq.n_regressors());
        for c in 1..eq.n_regressors() {
            support[c] = 1.0;
        }
        let inf = infer_equation(&eq, &sys, &support, true).unwrap();
        let singles = edge_tests(&eq, &inf, &singleton_groups(&x), y.names()).unwrap();
        let genes = edge_tests(&eq, &inf, &groups, y.names()).unwrap();
        for (slot, tests) in [(0, singles), (1, genes)] {
            for t in tests {
                total[slot] += 1;
                small[slot] += (t.test.p_value < 0.05) as usize;
            }
        }
    }
    for slot in 0..2 {
        let rate = small[slot] as f64 / total[slot] as f64;
        let sd = (0.05 * 0.95 / total[slot] as f64).sqrt();
        assert!((rate - 0.05).abs() < 4.0 * sd, "slot {slot}: rate {rate}");
    }
}

#[test]
fn refit_on_support_is_two_stage_on_that_support() {
    let mut r = rng(6);
    let (y, x) = random_sem(&mut r, 300, 3, 8);
    let eq = assemble_equation(&y, &x, 2).unwrap();
    let sys = CrossProducts::new(&y, &x).unwrap().system(2).unwrap();
    let cols = [0usize, 3, 4, 6];
    let mut sparse = DVector::zeros(eq.n_regressors());
    for &c in &cols {
        sparse[c] = 0.1;
    }
    let inf = infer_equation(&eq, &sys, &sparse, true).unwrap();
    let direct = sparsesem::model::two_stage_least_squares(&eq.restrict(&cols), &x).unwrap();
    for (k, &c) in cols.iter().enumerate() {
        assert!((inf.coefficients[c] - direct[k]).abs() < 1e-8);
    }
    let sigma = residual_variance(&eq, &inf.coefficients).unwrap();
    assert!((inf.sigma - sigma).abs() < 1e-12);
    let kept = infer_equation(&eq, &sys, &sparse, false).unwrap();
    assert_eq!(kept.coefficients, sparse);
}

#[test]
fn stability_selection_is_reproducible_and_bounded() {
    let mut r = rng(15);
    let (y, x) = random_sem(&mut r, 150, 3, 5);
    let groups = singleton_groups(&x);
    let settings = AdmmSettings::default().with_lambda(0.05 * sparsesem::admm::system_lambda_max(&y, &x).unwrap());
    for scheme in [ResampleScheme::Bootstrap, ResampleScheme::Subsample] {
        let config = StabilityConfig {
            resamples: 12,
            scheme,
            seed: 3,
            ..StabilityConfig::default()
        };
        let a = stability_selection(&y, &x, &groups, &settings, &config).unwrap();
        let b = stability_selection(&y, &x, &groups, &settings, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 2 + 5 * 3);
        for s in &a {
            assert!(s.selection_count <= 12);
            assert_eq!(s.kept, s.frequency > 0.8);
        }
    }
}

#[test]
fn network_edges_have_valid_p_values() {
    let mut r = rng(2);
    let (y, x) = random_sem(&mut r, 300, 3, 6);
    let settings = AdmmSettings::default().with_lambda(0.02 * sparsesem::admm::system_lambda_max(&y, &x).unwrap());
    let net = estimate_network(&y, &x, &singleton_groups(&x), &settings, &NetworkOptions::default()).unwrap();
    assert!(!net.edges.is_empty());
    for e in &net.edges {
        assert!((0.0..=1.0).contains(&e.p_value));
        assert!(e.statistic >= 0.0);
        assert_ne!(e.source, e.target);
    }
    let k = r.random_range(0..net.edges.len());
    assert!(net.edges[k].dof >= 1);
}
