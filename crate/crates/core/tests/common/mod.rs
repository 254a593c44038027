#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sparsesem::{ExogenousMatrix, PhenotypeMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

/// Centered additive genotype codes under Hardy-Weinberg, MAF in (0.1, 0.5).
pub fn genotype_matrix(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, k);
    for c in 0..k {
        let p: f64 = rng.random_range(0.1..0.5);
        for r in 0..n {
            let a = (rng.random::<f64>() < p) as u8 + (rng.random::<f64>() < p) as u8;
            x[(r, c)] = a as f64;
        }
        let mean = x.column(c).mean();
        x.column_mut(c).add_scalar_mut(-mean);
    }
    x
}

/// Random recursive system `y_i = Σ_{j<i} γ_ji y_j + Σ_k b_ki x_k + e_i`.
pub fn random_sem(rng: &mut ChaCha8Rng, n: usize, m: usize, k: usize) -> (PhenotypeMatrix, ExogenousMatrix) {
    let x = genotype_matrix(rng, n, k);
    let mut y = DMatrix::zeros(n, m);
    for i in 0..m {
        let mut col = DVector::from_fn(n, |_, _| 0.5 * normal(rng));
        for j in 0..i {
            if rng.random::<f64>() < 0.5 {
                let g: f64 = rng.random_range(-1.0..1.0);
                col += y.column(j) * g;
            }
        }
        for c in 0..k {
            if rng.random::<f64>() < 0.3 {
                let b: f64 = rng.random_range(-1.0..1.0);
                col += x.column(c) * b;
            }
        }
        y.set_column(i, &col);
    }
    let names = (0..m).map(|i| format!("y{i}")).collect();
    let xnames = (0..k).map(|c| format!("x{c}")).collect();
    (
        PhenotypeMatrix::new(y, names).unwrap(),
        ExogenousMatrix::new(x, xnames).unwrap(),
    )
}

pub fn soft(x: f64, k: f64) -> f64 {
    if x > k {
        x - k
    } else if x < -k {
        x + k
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for `Δ'AΔ - 2c'Δ + λ‖Δ‖₁`.
pub fn coordinate_descent(a: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, tol: f64) -> DVector<f64> {
    let p = c.len();
    let mut d: DVector<f64> = DVector::zeros(p);
    for _ in 0..2_000_000 {
        let mut change: f64 = 0.0;
        for j in 0..p {
            if a[(j, j)] <= 0.0 {
                continue;
            }
            let mut r = c[j];
            for k in 0..p {
                if k != j {
                    r -= a[(j, k)] * d[k];
                }
            }
            let new = soft(r, lambda / 2.0) / a[(j, j)];
            change = change.max((new - d[j]).abs());
            d[j] = new;
        }
        if change < tol {
            break;
        }
    }
    d
}

/// Cyclic Jacobi rotations; eigenvalues sorted descending with matching columns.
pub fn jacobi_eigen(sym: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = sym.nrows();
    let mut a = sym.clone();
    let mut v = DMatrix::identity(n, n);
    for _ in 0..200 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = cos * akp - sin * akq;
                    a[(k, q)] = sin * akp + cos * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = cos * apk - sin * aqk;
                    a[(q, k)] = sin * apk + cos * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = cos * vkp - sin * vkq;
                    v[(k, q)] = sin * vkp + cos * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (values, vectors)
}

/// Every simple path by depth-first search over a dense weight matrix
/// (`w[(s, t)] != 0` is an edge s -> t).
pub fn dfs_paths(w: &DMatrix<f64>, source: usize, target: usize) -> Vec<(Vec<usize>, f64)> {
    fn go(w: &DMatrix<f64>, at: usize, target: usize, path: &mut Vec<usize>, prod: f64, out: &mut Vec<(Vec<usize>, f64)>) {
        if at == target {
            out.push((path.clone(), prod));
            return;
        }
        for next in 0..w.nrows() {
            if w[(at, next)] != 0.0 && !path.contains(&next) {
                path.push(next);
                go(w, next, target, path, prod * w[(at, next)], out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(w, source, target, &mut vec![source], 1.0, &mut out);
    out
}

/// Least squares with intercept through QR; returns slopes.
pub fn ols(design: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let n = design.nrows();
    let mut full = DMatrix::from_element(n, design.ncols() + 1, 1.0);
    full.columns_mut(1, design.ncols()).copy_from(design);
    let qr = full.qr();
    let coef = qr.r().solve_upper_triangular(&(qr.q().transpose() * y)).unwrap();
    coef.rows(1, design.ncols()).into_owned()
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
