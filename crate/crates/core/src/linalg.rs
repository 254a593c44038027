//! Small dense linear-algebra helpers shared by the estimators.

use std::sync::atomic::{AtomicBool, Ordering};

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Result, SemError};

/// Relative ridge added to an ill-conditioned Gram matrix, scaled by `trace / dim`.
pub const RIDGE_SCALE: f64 = 1e-8;

/// Condition number above which a Gram matrix is treated as near-singular.
pub const CONDITION_LIMIT: f64 = 1e12;

static RIDGE_WARNED: AtomicBool = AtomicBool::new(false);

/// Cholesky factor of a symmetric positive (semi)definite Gram matrix.
///
/// When the matrix is near-singular a ridge of `1e-8 * trace / dim` is added
/// to the diagonal before factorizing and `ridged` is set.
#[derive(Clone, Debug)]
pub struct GramFactor {
    chol: Cholesky<f64, Dyn>,
    matrix: DMatrix<f64>,
    dim: usize,
    pub ridged: bool,
    pub condition: f64,
}

impl GramFactor {
    pub fn new(gram: &DMatrix<f64>) -> Result<Self> {
        let dim = gram.nrows();
        if gram.ncols() != dim {
            return Err(SemError::Dimension(format!(
                "Gram matrix is {}x{}",
                gram.nrows(),
                gram.ncols()
            )));
        }
        if dim == 0 {
            return Ok(Self {
                chol: Cholesky::new(DMatrix::zeros(0, 0)).expect("empty Cholesky"),
                matrix: DMatrix::zeros(0, 0),
                dim,
                ridged: false,
                condition: 1.0,
            });
        }
        let condition = condition_number(gram);
        if condition <= CONDITION_LIMIT {
            if let Some(chol) = Cholesky::new(gram.clone()) {
                return Ok(Self {
                    chol,
                    matrix: gram.clone(),
                    dim,
                    ridged: false,
                    condition,
                });
            }
        }
        let trace = gram.trace();
        if !(trace > 0.0) || !trace.is_finite() {
            return Err(SemError::Singular("Gram matrix has zero trace".into()));
        }
        if RIDGE_WARNED.swap(true, Ordering::Relaxed) {
            debug!("Gram matrix condition number {condition:.3e}; adding ridge");
        } else {
            warn!("Gram matrix condition number {condition:.3e}; adding ridge (further occurrences logged at debug level)");
        }
        let mut guarded = gram.clone();
        let ridge = RIDGE_SCALE * trace / dim as f64;
        for i in 0..dim {
            guarded[(i, i)] += ridge;
        }
        let chol = Cholesky::new(guarded.clone())
            .ok_or_else(|| SemError::Singular("ridge-guarded Gram matrix".into()))?;
        Ok(Self {
            chol,
            matrix: guarded,
            dim,
            ridged: true,
            condition,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The factorized matrix, including any ridge.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    /// `v' G^{-1} v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.chol.solve(v))
    }
}

/// Ratio of extreme eigenvalues of a symmetric matrix; infinite when singular.
pub fn condition_number(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(sym.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 || min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `a x = b` for symmetric positive definite `a`.
///
/// Returns `None` when `a` is numerically singular (condition number above
/// [`CONDITION_LIMIT`]).
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if a.nrows() == 0 {
        return Some(DVector::zeros(0));
    }
    if condition_number(a) > CONDITION_LIMIT {
        return None;
    }
    Cholesky::new(a.clone()).map(|c| c.solve(b))
}

/// Inverse of a symmetric positive definite matrix, `None` when singular.
pub fn inverse_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    if condition_number(a) > CONDITION_LIMIT {
        return None;
    }
    Cholesky::new(a.clone()).map(|c| c.inverse())
}

/// Inverse with the same ridge guard as [`GramFactor`]; the flag reports whether it fired.
pub fn inverse_spd_guarded(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    if let Some(inv) = inverse_spd(a) {
        return Ok((inv, false));
    }
    let factor = GramFactor::new(a)?;
    let eye = DMatrix::identity(a.nrows(), a.nrows());
    Ok((factor.solve(&eye), true))
}

/// Copies the listed rows of `m`.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// Copies the listed columns of `m`.
pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |r, c| m[(r, cols[c])])
}

pub fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Symmetric submatrix `m[idx, idx]`.
pub fn select_block(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])])
}

/// Ordinary least squares slope and standard error of `y` on `x` with an intercept.
pub fn simple_regression(x: &DVector<f64>, y: &DVector<f64>) -> Result<(f64, f64)> {
    let n = x.len();
    if y.len() != n {
        return Err(SemError::Dimension(format!(
            "regression on {} vs {} observations",
            n,
            y.len()
        )));
    }
    if n < 3 {
        return Err(SemError::InvalidInput("simple regression needs n >= 3".into()));
    }
    let mx = x.mean();
    let my = y.mean();
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if sxx <= 0.0 {
        return Err(SemError::Singular("constant regressor".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = (0..n)
        .map(|i| {
            let r = y[i] - intercept - slope * x[i];
            r * r
        })
        .sum();
    let se = (rss / (n as f64 - 2.0) / sxx).sqrt();
    Ok((slope, se))
}
