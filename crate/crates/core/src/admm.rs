//! ADMM solver for the l1-penalized two-stage least-squares problem
//!
//! ```text
//! minimize  f(Δ) + λ‖Δ‖₁,   f(Δ) = (X'y - X'WΔ)' (X'X)⁻¹ (X'y - X'WΔ)
//! ```
//!
//! The split `Δ = Z` gives the scaled iterations
//!
//! ```text
//! Δ ← [A + ρI]⁻¹ (c + ρ(Z - u))          (Woodbury form, see `delta_update`)
//! Z ← S(Δ + u, λ / 2ρ)
//! u ← u + Δ - Z
//! ```
//!
//! where `A = W'X(X'X)⁻¹X'W` and `c = W'X(X'X)⁻¹X'y`. The `Δ` step minimizes
//! `f/2 + (ρ/2)‖Δ - Z + u‖²`, so the soft-threshold level is `λ/(2ρ)` for the
//! iterations to target `f + λ‖·‖₁`.

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, SemError};
use crate::linalg;
use crate::model::{
    assemble_equation, CrossProducts, EquationView, ExogenousMatrix, PhenotypeMatrix,
    ProjectedSystem, Regressor, SemFit,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmmSettings {
    pub rho: f64,
    pub lambda: f64,
    pub max_iter: usize,
    pub tol_primal: f64,
    pub tol_dual: f64,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: 1.0,
            lambda: 0.0,
            max_iter: 20_000,
            tol_primal: 1e-6,
            tol_dual: 1e-6,
        }
    }
}

impl AdmmSettings {
    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(SemError::InvalidInput(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(SemError::InvalidInput(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(self.tol_primal > 0.0) || !(self.tol_dual > 0.0) {
            return Err(SemError::InvalidInput("tolerances must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(SemError::InvalidInput("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdmmState {
    pub delta: DVector<f64>,
    pub z: DVector<f64>,
    pub u: DVector<f64>,
    pub iter: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
    /// The Woodbury inner matrix could not be factorized and the direct form was used.
    pub direct_fallback: bool,
}

/// Elementwise `sgn(v)·max(|v| - kappa, 0)`.
pub fn soft_threshold(v: &DVector<f64>, kappa: f64) -> DVector<f64> {
    v.map(|x| soft_threshold_scalar(x, kappa))
}

#[inline]
pub fn soft_threshold_scalar(x: f64, kappa: f64) -> f64 {
    if x > kappa {
        x - kappa
    } else if x < -kappa {
        x + kappa
    } else {
        0.0
    }
}

/// Precomputed `Δ` step for a fixed equation and `ρ`.
enum StepOperator {
    /// `(1/ρ)[I - U(ρX'X + U'U)⁻¹U']` with `U = W'X`.
    Woodbury {
        u: DMatrix<f64>,
        inner: Cholesky<f64, Dyn>,
    },
    /// `[A + ρI]⁻¹`.
    Direct(Cholesky<f64, Dyn>),
}

pub struct DeltaStep {
    op: StepOperator,
    rho: f64,
}

impl DeltaStep {
    pub fn new(system: &ProjectedSystem, rho: f64) -> Result<Self> {
        let u = system.xtw.transpose();
        let mut inner = system.gram.matrix() * rho + &system.xtw * &u;
        symmetrize(&mut inner);
        if linalg::condition_number(&inner) <= linalg::CONDITION_LIMIT {
            if let Some(chol) = Cholesky::new(inner) {
                return Ok(Self {
                    op: StepOperator::Woodbury { u, inner: chol },
                    rho,
                });
            }
        }
        warn!(
            "equation {}: Woodbury inner matrix singular, using direct form",
            system.equation
        );
        Ok(Self {
            op: StepOperator::Direct(direct_factor(system, rho)?),
            rho,
        })
    }

    pub fn direct(system: &ProjectedSystem, rho: f64) -> Result<Self> {
        Ok(Self {
            op: StepOperator::Direct(direct_factor(system, rho)?),
            rho,
        })
    }

    pub fn is_fallback(&self) -> bool {
        matches!(self.op, StepOperator::Direct(_))
    }

    /// `Δ = [A + ρI]⁻¹ (c + ρ·shift)` with `shift = Z - u`.
    pub fn apply(&self, c: &DVector<f64>, shift: &DVector<f64>) -> DVector<f64> {
        let v = c + shift * self.rho;
        match &self.op {
            StepOperator::Woodbury { u, inner } => {
                let t = inner.solve(&(u.transpose() * &v));
                (v - u * t) / self.rho
            }
            StepOperator::Direct(chol) => chol.solve(&v),
        }
    }
}

fn direct_factor(system: &ProjectedSystem, rho: f64) -> Result<Cholesky<f64, Dyn>> {
    let mut m = system.a.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += rho;
    }
    Cholesky::new(m).ok_or_else(|| SemError::Singular("A + rho I".into()))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// One Woodbury-form `Δ` update. Returns the update and whether the direct
/// form had to be used instead.
pub fn delta_update(
    system: &ProjectedSystem,
    z: &DVector<f64>,
    u: &DVector<f64>,
    rho: f64,
) -> Result<(DVector<f64>, bool)> {
    check_len(system, z)?;
    check_len(system, u)?;
    let step = DeltaStep::new(system, rho)?;
    Ok((step.apply(&system.c, &(z - u)), step.is_fallback()))
}

/// Reference `Δ` update by a direct solve of `[A + ρI] Δ = c + ρ(Z - u)`.
pub fn delta_update_direct(
    system: &ProjectedSystem,
    z: &DVector<f64>,
    u: &DVector<f64>,
    rho: f64,
) -> Result<DVector<f64>> {
    check_len(system, z)?;
    check_len(system, u)?;
    let step = DeltaStep::direct(system, rho)?;
    Ok(step.apply(&system.c, &(z - u)))
}

fn check_len(system: &ProjectedSystem, v: &DVector<f64>) -> Result<()> {
    if v.len() != system.dim() {
        return Err(SemError::Dimension(format!(
            "vector of length {} for {} coefficients",
            v.len(),
            system.dim()
        )));
    }
    Ok(())
}

/// `f(Δ) + λ‖Δ‖₁`.
pub fn penalized_objective(system: &ProjectedSystem, delta: &DVector<f64>, lambda: f64) -> f64 {
    system.loss(delta) + lambda * delta.lp_norm(1)
}

/// Smallest `λ` for which the zero vector is optimal: `‖∇f(0)‖∞ = ‖2c‖∞`.
pub fn lambda_max(system: &ProjectedSystem) -> f64 {
    2.0 * system.c.amax()
}

/// `points` log-spaced values from `lambda_max` down to `1e-3 * lambda_max`.
pub fn lambda_grid(lambda_max: f64, points: usize) -> Vec<f64> {
    if points == 0 || !(lambda_max > 0.0) {
        return Vec::new();
    }
    if points == 1 {
        return vec![lambda_max];
    }
    let lo = (1e-3 * lambda_max).ln();
    let hi = lambda_max.ln();
    (0..points)
        .map(|i| (hi + (lo - hi) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Sparse estimate (`Z` at termination) with the final solver state.
#[derive(Clone, Debug)]
pub struct SparseSolution {
    pub coefficients: DVector<f64>,
    pub objective: f64,
    pub state: AdmmState,
}

pub fn solve_sparse_equation(
    eq: &EquationView,
    instr: &ExogenousMatrix,
    settings: &AdmmSettings,
) -> Result<SparseSolution> {
    settings.validate()?;
    let system = ProjectedSystem::new(eq, instr.values())?;
    solve_system(&system, settings, None)
}

/// Jacobi-rescaled copy of a system: `Δ = D θ` with `D = diag(A)^{-1/2}`.
///
/// The penalty becomes `λ Σ d_j |θ_j|`, so the minimizer is unchanged while
/// every coordinate of the rescaled `A` has unit diagonal and one `ρ` suits
/// all sample sizes and column scales.
pub struct ScaledSystem {
    pub system: ProjectedSystem,
    pub scale: DVector<f64>,
}

impl ScaledSystem {
    pub fn new(system: &ProjectedSystem) -> Self {
        let scale = DVector::from_iterator(
            system.dim(),
            system.a.diagonal().iter().map(|&a| if a > f64::EPSILON { 1.0 / a.sqrt() } else { 1.0 }),
        );
        let mut xtw = system.xtw.clone();
        for (j, mut col) in xtw.column_iter_mut().enumerate() {
            col *= scale[j];
        }
        let scaled = ProjectedSystem::from_parts(system.equation, xtw, system.xty.clone(), system.gram.clone());
        Self { system: scaled, scale }
    }

    pub fn to_original(&self, theta: &DVector<f64>) -> DVector<f64> {
        theta.component_mul(&self.scale)
    }

    pub fn to_scaled(&self, delta: &DVector<f64>) -> DVector<f64> {
        delta.component_div(&self.scale)
    }

    fn objective(&self, theta: &DVector<f64>, lambda: f64) -> f64 {
        self.system.loss(theta) + lambda * theta.component_mul(&self.scale).lp_norm(1)
    }
}

/// Runs the ADMM iterations on a prepared system.
///
/// Without a warm start the iterations begin from `Δ⁰ = [A + ρI]⁻¹c`,
/// `Z⁰ = Δ⁰`, `u⁰ = 0` in the rescaled coordinates of [`ScaledSystem`]. A
/// warm start supplies `(Z, u)` from a previous solve, e.g. the neighbouring
/// point of a `λ` path.
pub fn solve_system(
    system: &ProjectedSystem,
    settings: &AdmmSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<SparseSolution> {
    settings.validate()?;
    let scaled = ScaledSystem::new(system);
    let step = DeltaStep::new(&scaled.system, settings.rho)?;
    solve_with_step(&scaled, &step, settings, warm)
}

/// ADMM on a rescaled system with a prepared `Δ` step. `warm` holds `Z` in
/// original coordinates and `u` in rescaled coordinates, as returned in
/// [`AdmmState`].
pub fn solve_with_step(
    scaled: &ScaledSystem,
    step: &DeltaStep,
    settings: &AdmmSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<SparseSolution> {
    settings.validate()?;
    let system = &scaled.system;
    let p = system.dim();
    let kappa = &scaled.scale * (settings.lambda / (2.0 * settings.rho));
    // KKT at zero: |c_j| ≤ λ/2 for every coordinate
    let at_zero = system
        .c
        .iter()
        .zip(kappa.iter())
        .all(|(&c, &k)| c.abs() <= k * settings.rho * (1.0 + 1e-10));
    if at_zero {
        let zeros = DVector::zeros(p);
        return Ok(SparseSolution {
            coefficients: zeros.clone(),
            objective: scaled.objective(&zeros, settings.lambda),
            state: AdmmState {
                delta: zeros.clone(),
                z: zeros,
                u: &system.c / settings.rho,
                iter: 0,
                primal_residual: 0.0,
                dual_residual: 0.0,
                converged: true,
                direct_fallback: step.is_fallback(),
            },
        });
    }
    let (mut z, mut u) = match warm {
        Some((z0, u0)) => {
            check_len(system, z0)?;
            check_len(system, u0)?;
            (scaled.to_scaled(z0), u0.clone())
        }
        None => {
            let zeros = DVector::zeros(p);
            (step.apply(&system.c, &zeros), zeros)
        }
    };
    let mut delta = z.clone();
    let mut best = (f64::INFINITY, z.clone());
    let mut primal = f64::INFINITY;
    let mut dual = f64::INFINITY;
    let mut converged = false;
    let mut iter = 0;
    while iter < settings.max_iter {
        iter += 1;
        delta = step.apply(&system.c, &(&z - &u));
        let v = &delta + &u;
        let z_next = DVector::from_iterator(p, v.iter().zip(kappa.iter()).map(|(&x, &k)| soft_threshold_scalar(x, k)));
        u += &delta - &z_next;
        primal = (&delta - &z_next).norm();
        dual = settings.rho * (&z_next - &z).norm();
        z = z_next;
        if primal <= settings.tol_primal && dual <= settings.tol_dual {
            converged = true;
            break;
        }
        if iter % 50 == 0 {
            let obj = scaled.objective(&z, settings.lambda);
            if obj < best.0 {
                best = (obj, z.clone());
            }
        }
    }
    let theta = if converged {
        z.clone()
    } else {
        let obj = scaled.objective(&z, settings.lambda);
        if obj < best.0 {
            best = (obj, z.clone());
        }
        debug!(
            "equation {}: ADMM stopped after {} iterations (primal {:.2e}, dual {:.2e})",
            system.equation, iter, primal, dual
        );
        best.1
    };
    let objective = scaled.objective(&theta, settings.lambda);
    Ok(SparseSolution {
        coefficients: scaled.to_original(&theta),
        objective,
        state: AdmmState {
            delta: scaled.to_original(&delta),
            z: scaled.to_original(&z),
            u,
            iter,
            primal_residual: primal,
            dual_residual: dual,
            converged,
            direct_fallback: step.is_fallback(),
        },
    })
}

/// Per-equation sparse solutions for the whole system at one `λ`.
#[derive(Clone, Debug)]
pub struct SystemSolution {
    pub fit: SemFit,
    pub equations: Vec<EquationView>,
    pub solutions: Vec<SparseSolution>,
}

/// Fits every equation of `Y Γ + X B + E = 0` independently (in parallel).
pub fn fit_sem(
    y: &PhenotypeMatrix,
    instr: &ExogenousMatrix,
    settings: &AdmmSettings,
) -> Result<SystemSolution> {
    settings.validate()?;
    let cross = CrossProducts::new(y, instr)?;
    fit_sem_with(y, instr, &cross, settings)
}

/// [`fit_sem`] with precomputed cross products.
pub fn fit_sem_with(
    y: &PhenotypeMatrix,
    instr: &ExogenousMatrix,
    cross: &CrossProducts,
    settings: &AdmmSettings,
) -> Result<SystemSolution> {
    settings.validate()?;
    let results: Vec<Result<(EquationView, SparseSolution)>> = (0..y.n_traits())
        .into_par_iter()
        .map(|i| {
            let eq = assemble_equation(y, instr, i)?;
            let system = cross.system(i)?;
            let sol = solve_system(&system, settings, None)?;
            if !sol.state.converged {
                warn!("equation {i}: ADMM did not converge in {} iterations", sol.state.iter);
            }
            Ok((eq, sol))
        })
        .collect();
    let mut equations = Vec::with_capacity(results.len());
    let mut solutions = Vec::with_capacity(results.len());
    for r in results {
        let (eq, sol) = r?;
        equations.push(eq);
        solutions.push(sol);
    }
    let scattered: Vec<(Vec<Regressor>, DVector<f64>)> = equations
        .iter()
        .zip(&solutions)
        .map(|(eq, s)| (eq.labels.clone(), s.coefficients.clone()))
        .collect();
    let sigma = equations
        .iter()
        .zip(&solutions)
        .map(|(eq, s)| crate::model::residual_variance(eq, &s.coefficients))
        .collect::<Result<Vec<_>>>()?;
    let converged = solutions.iter().map(|s| s.state.converged).collect();
    let fit = SemFit::from_equations(
        y.n_traits(),
        instr.n_columns(),
        &scattered,
        settings.lambda,
        sigma,
        converged,
    )?;
    Ok(SystemSolution {
        fit,
        equations,
        solutions,
    })
}

/// Largest `λ_max` over the equations of the system.
pub fn system_lambda_max(y: &PhenotypeMatrix, instr: &ExogenousMatrix) -> Result<f64> {
    let cross = CrossProducts::new(y, instr)?;
    let mut best: f64 = 0.0;
    for i in 0..y.n_traits() {
        best = best.max(lambda_max(&cross.system(i)?));
    }
    Ok(best)
}

#[derive(Clone, Debug)]
pub struct CvPoint {
    pub lambda: f64,
    /// Held-out loss per equation, averaged over folds.
    pub per_equation: Vec<f64>,
    /// Sum of `per_equation`.
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct CvResult {
    pub lambda: f64,
    pub curve: Vec<CvPoint>,
}

/// K-fold cross-validation of `λ` over a descending grid.
///
/// Each fold fits every equation along the grid (warm-started from the
/// previous grid point) and scores the held-out loss `f` computed with the
/// held-out rows. The `λ` minimizing the summed loss is returned; ties go to
/// the larger `λ`.
pub fn cross_validate_lambda(
    y: &PhenotypeMatrix,
    instr: &ExogenousMatrix,
    grid: &[f64],
    folds: usize,
    seed: u64,
    settings: &AdmmSettings,
) -> Result<CvResult> {
    if folds < 2 {
        return Err(SemError::InvalidInput("cross-validation needs at least 2 folds".into()));
    }
    if grid.is_empty() {
        return Err(SemError::InvalidInput("empty lambda grid".into()));
    }
    if grid.windows(2).any(|w| w[1] > w[0]) {
        return Err(SemError::InvalidInput("lambda grid must be sorted descending".into()));
    }
    settings.validate()?;
    let n = y.n();
    if instr.n() != n {
        return Err(SemError::Dimension("instrument rows".into()));
    }
    if folds > n {
        return Err(SemError::InvalidInput(format!("{folds} folds for {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = instr.n_columns();
    let fold_rows: Vec<Vec<usize>> = (0..folds)
        .map(|f| {
            let lo = f * n / folds;
            let hi = (f + 1) * n / folds;
            let mut rows = order[lo..hi].to_vec();
            rows.sort_unstable();
            rows
        })
        .collect();
    for (f, rows) in fold_rows.iter().enumerate() {
        if rows.len() < k {
            return Err(SemError::InvalidInput(format!(
                "fold {} has {} rows, fewer than the {} instrument columns",
                f + 1,
                rows.len(),
                k
            )));
        }
    }
    let m = y.n_traits();
    let tasks: Vec<(usize, usize)> = (0..folds).flat_map(|f| (0..m).map(move |i| (f, i))).collect();
    let errors: Vec<Result<Vec<f64>>> = tasks
        .par_iter()
        .map(|&(f, i)| {
            let test = &fold_rows[f];
            let train: Vec<usize> = fold_rows
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, r)| r.iter().copied())
                .collect();
            let sys_train = CrossProducts::new(&y.select_rows(&train), &instr.select_rows(&train))?.system(i)?;
            let sys_test = CrossProducts::new(&y.select_rows(test), &instr.select_rows(test))?.system(i)?;
            let scaled = ScaledSystem::new(&sys_train);
            let step = DeltaStep::new(&scaled.system, settings.rho)?;
            let mut warm: Option<(DVector<f64>, DVector<f64>)> = None;
            let mut out = Vec::with_capacity(grid.len());
            for &lambda in grid {
                let s = settings.with_lambda(lambda);
                let sol = solve_with_step(
                    &scaled,
                    &step,
                    &s,
                    warm.as_ref().map(|(z, u)| (z, u)),
                )?;
                out.push(sys_test.loss(&sol.coefficients));
                warm = Some((sol.state.z.clone(), sol.state.u.clone()));
            }
            Ok(out)
        })
        .collect();
    let mut per_eq = vec![vec![0.0; m]; grid.len()];
    for (&(_, i), e) in tasks.iter().zip(errors) {
        let e = e?;
        for (g, v) in e.into_iter().enumerate() {
            per_eq[g][i] += v / folds as f64;
        }
    }
    let curve: Vec<CvPoint> = grid
        .iter()
        .zip(per_eq)
        .map(|(&lambda, per_equation)| CvPoint {
            lambda,
            error: per_equation.iter().sum(),
            per_equation,
        })
        .collect();
    let mut chosen = 0;
    for (g, p) in curve.iter().enumerate() {
        if p.error < curve[chosen].error {
            chosen = g;
        }
    }
    Ok(CvResult {
        lambda: curve[chosen].lambda,
        curve,
    })
}
