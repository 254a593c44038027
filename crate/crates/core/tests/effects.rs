mod common;

use std::collections::BTreeSet;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use sparsesem::effects::{
    adjusted_total_effect, all_effect_reports, direct_effect, effect_report, enumerate_paths, indirect_effect,
    marginal_effect, total_effect_paths, total_effect_regression, NodeKind,
};
use sparsesem::{CausalGraph, EdgeKind};

// a=2 g=3 b=5 d=7 h=11 c=13, distinct primes so products identify their paths
fn three_path_graph() -> CausalGraph {
    let mut g = CausalGraph::new();
    for (s, t, kind, w) in [
        ("X", "A", EdgeKind::Beta, 2.0),
        ("A", "Y", EdgeKind::Gamma, 3.0),
        ("X", "B", EdgeKind::Beta, 5.0),
        ("B", "D", EdgeKind::Gamma, 7.0),
        ("D", "Y", EdgeKind::Gamma, 11.0),
        ("A", "C", EdgeKind::Gamma, 13.0),
        ("C", "D", EdgeKind::Gamma, 7.0),
    ] {
        g.add_named_edge(s, t, kind, w, None).unwrap();
    }
    g
}

#[test]
fn three_path_products() {
    let g = three_path_graph();
    let x = g.node_index("X").unwrap();
    let y = g.node_index("Y").unwrap();
    let paths = enumerate_paths(&g, x, y, None).unwrap();
    let names: BTreeSet<String> = paths
        .iter()
        .map(|p| p.nodes.iter().map(|&v| g.nodes()[v].name.as_str()).collect::<Vec<_>>().join(""))
        .collect();
    let expected: BTreeSet<String> = ["XAY", "XBDY", "XACDY"].iter().map(|s| s.to_string()).collect();
    assert_eq!(names, expected);
    let mut products: Vec<f64> = paths.iter().map(|p| p.product).collect();
    products.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // ag, bdh, acdh
    assert_eq!(products, vec![6.0, 385.0, 2002.0]);
    assert_eq!(total_effect_paths(&g, x, y).unwrap(), 6.0 + 385.0 + 2002.0);
    assert_eq!(direct_effect(&g, x, y), 0.0);
    let via = [g.node_index("B").unwrap(), g.node_index("D").unwrap()];
    assert_eq!(indirect_effect(&g, x, y, Some(&via)).unwrap(), 385.0);
}

#[test]
fn met_decomposition() {
    let mut g = CausalGraph::new();
    g.add_named_edge("MET", "SBP", EdgeKind::Beta, -0.0596, None).unwrap();
    g.add_named_edge("MET", "DBP", EdgeKind::Beta, 0.0621, None).unwrap();
    g.add_named_edge("DBP", "SBP", EdgeKind::Gamma, 0.605, None).unwrap();
    let met = g.node_index("MET").unwrap();
    let sbp = g.node_index("SBP").unwrap();
    let r = effect_report(&g, met, sbp, None).unwrap();
    assert!((r.direct + 0.0596).abs() < 1e-12);
    assert!((r.indirect - 0.0621 * 0.605).abs() < 1e-12);
    assert!((r.total - (-0.0220)).abs() < 1e-4);
}

#[test]
fn empty_graph_has_no_reports() {
    assert!(all_effect_reports(&CausalGraph::new(), None).unwrap().is_empty());
}

fn random_dag(seed: u64, n: usize, density: f64) -> (CausalGraph, DMatrix<f64>) {
    let mut r = rng(seed);
    let mut w = DMatrix::zeros(n, n);
    let mut g = CausalGraph::new();
    for v in 0..n {
        g.add_node(&format!("v{v}"), if v == 0 { NodeKind::Gene } else { NodeKind::Trait }).unwrap();
    }
    for s in 0..n {
        for t in s + 1..n {
            if r.random::<f64>() < density {
                let wt: f64 = r.random_range(-1.0..1.0);
                w[(s, t)] = wt;
                let kind = if s == 0 { EdgeKind::Beta } else { EdgeKind::Gamma };
                g.add_edge(s, t, kind, wt, None).unwrap();
            }
        }
    }
    (g, w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn paths_match_depth_first_oracle(seed in 0u64..100_000, n in 3usize..9, density in 0.2f64..0.9) {
        let (g, w) = random_dag(seed, n, density);
        for s in 0..n {
            for t in 0..n {
                if s == t {
                    continue;
                }
                let ours = enumerate_paths(&g, s, t, None).unwrap();
                let oracle = dfs_paths(&w, s, t);
                let a: BTreeSet<Vec<usize>> = ours.iter().map(|p| p.nodes.clone()).collect();
                let b: BTreeSet<Vec<usize>> = oracle.iter().map(|p| p.0.clone()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn total_effect_is_neumann_series(seed in 0u64..100_000, n in 3usize..9, density in 0.2f64..0.9) {
        let (g, w) = random_dag(seed, n, density);
        let inv = (DMatrix::identity(n, n) - &w).try_inverse().unwrap();
        for s in 0..n {
            for t in 0..n {
                if s == t {
                    continue;
                }
                let total = total_effect_paths(&g, s, t).unwrap();
                prop_assert!((total - inv[(s, t)]).abs() < 1e-10);
                let split = direct_effect(&g, s, t) + indirect_effect(&g, s, t, None).unwrap();
                prop_assert!((split - total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn path_length_cap_drops_long_paths(seed in 0u64..100_000, cap in 1usize..4) {
        let (g, w) = random_dag(seed, 7, 0.7);
        let capped = enumerate_paths(&g, 0, 6, Some(cap)).unwrap();
        let expected = dfs_paths(&w, 0, 6).into_iter().filter(|p| p.0.len() - 1 <= cap).count();
        prop_assert_eq!(capped.len(), expected);
        prop_assert!(capped.iter().all(|p| p.n_edges() <= cap));
    }

    #[test]
    fn adjusted_effect_matches_multiple_regression(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let n = 60;
        let c: f64 = r.random_range(-2.0..2.0);
        let z = DVector::from_fn(n, |_, _| normal(&mut r));
        let x = DVector::from_fn(n, |i, _| c * z[i] + normal(&mut r));
        let (bx, bz): (f64, f64) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |i, _| bx * x[i] + bz * z[i] + normal(&mut r));
        let slope = |t: &DVector<f64>, s: &DVector<f64>| marginal_effect(t, s).unwrap().estimate;
        let adj = adjusted_total_effect(slope(&y, &x), slope(&y, &z), slope(&z, &x), slope(&x, &z)).unwrap();
        let mut design = DMatrix::zeros(n, 2);
        design.set_column(0, &x);
        design.set_column(1, &z);
        let oracle = ols(&design, &y)[0];
        prop_assert!((adj - oracle).abs() <= 1e-6 * oracle.abs().max(1.0), "{} vs {}", adj, oracle);
        let reg = total_effect_regression(&y, &x, &[z.clone()]).unwrap().estimate;
        prop_assert!((reg - oracle).abs() <= 1e-8 * oracle.abs().max(1.0));
    }
}

#[test]
fn empty_adjustment_set_is_marginal_slope() {
    let mut r = rng(8);
    let x = DVector::from_fn(40, |_, _| normal(&mut r));
    let y = DVector::from_fn(40, |i, _| 0.7 * x[i] + normal(&mut r));
    let a = total_effect_regression(&y, &x, &[]).unwrap();
    let b = marginal_effect(&y, &x).unwrap();
    assert_eq!(a, b);
    let design = DMatrix::from_column_slice(40, 1, x.as_slice());
    assert!((a.estimate - ols(&design, &y)[0]).abs() < 1e-12);
    // with β_YZ = 0 and β_ZX = 0 the adjustment returns β_YX exactly
    assert_eq!(adjusted_total_effect(0.37, 0.0, 0.0, 0.0).unwrap(), 0.37);
}

#[test]
fn gene_nodes_cannot_receive_edges() {
    let mut g = CausalGraph::new();
    g.add_named_edge("G1", "T1", EdgeKind::Beta, 1.0, None).unwrap();
    let gene = g.node_index("G1").unwrap();
    let t = g.node_index("T1").unwrap();
    assert!(g.add_edge(t, gene, EdgeKind::Gamma, 1.0, None).is_err());
}
