//! SEM data model and the unpenalized generalized (two-stage) least-squares estimator.
//!
//! The system is `Y Γ + X B + E = 0` with `diag(Γ) = -1`, so equation `i`
//! reads `y_i = Y_{-i} γ_{-i} + X B_i + e_i`. Each equation is estimated on
//! its own, using the exogenous matrix (genotypes or FPC scores) as the
//! instrument set.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SemError};
use crate::linalg::{self, GramFactor};

/// Magnitude below which stored coefficients are set to exactly zero.
pub const HARD_ZERO: f64 = 1e-8;

/// `n x M` matrix of endogenous traits.
#[derive(Clone, Debug)]
pub struct PhenotypeMatrix {
    values: DMatrix<f64>,
    names: Vec<String>,
}

impl PhenotypeMatrix {
    pub fn new(values: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(SemError::Dimension(format!(
                "{} trait names for {} columns",
                names.len(),
                values.ncols()
            )));
        }
        if values.ncols() == 0 {
            return Err(SemError::InvalidInput("no phenotypes".into()));
        }
        if values.nrows() <= values.ncols() {
            return Err(SemError::InvalidInput(format!(
                "need more individuals than traits (n = {}, M = {})",
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(SemError::InvalidInput(format!(
                "non-finite phenotype value at row {}, trait '{}'",
                r + 1,
                names[c]
            )));
        }
        Ok(Self { values, names })
    }

    /// Builds the matrix after centering each column and scaling it to unit sd.
    pub fn standardized(values: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let raw = Self::new(values, names)?;
        let mut values = raw.values;
        for (c, mut col) in values.column_iter_mut().enumerate() {
            let n = col.len() as f64;
            let mean = col.mean();
            col.add_scalar_mut(-mean);
            let sd = (col.norm_squared() / (n - 1.0)).sqrt();
            if !(sd > 0.0) {
                return Err(SemError::InvalidInput(format!(
                    "trait '{}' has zero variance",
                    raw.names[c]
                )));
            }
            col /= sd;
        }
        Ok(Self {
            values,
            names: raw.names,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_traits(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.values.column(i).into_owned()
    }

    /// Row subset, e.g. a cross-validation fold or a bootstrap resample.
    ///
    /// The `n > M` check is not repeated here.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            values: linalg::select_rows(&self.values, rows),
            names: self.names.clone(),
        }
    }
}

/// `n x K` matrix of exogenous variables: encoded genotypes, covariates, or FPC scores.
#[derive(Clone, Debug)]
pub struct ExogenousMatrix {
    values: DMatrix<f64>,
    names: Vec<String>,
}

impl ExogenousMatrix {
    pub fn new(values: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(SemError::Dimension(format!(
                "{} exogenous names for {} columns",
                names.len(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SemError::InvalidInput("non-finite exogenous value".into()));
        }
        Ok(Self { values, names })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_columns(&self) -> usize {
        self.values.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            values: linalg::select_rows(&self.values, rows),
            names: self.names.clone(),
        }
    }
}

/// Column of the regressor matrix `W_i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regressor {
    /// Another phenotype, by trait index.
    Phenotype(usize),
    /// An exogenous column, by column index.
    Exogenous(usize),
}

/// One structural equation `y_i = W_i Δ_i + e_i` with `W_i = [Y_{-i} X]`.
#[derive(Clone, Debug)]
pub struct EquationView {
    pub target: usize,
    pub response: DVector<f64>,
    pub regressors: DMatrix<f64>,
    pub labels: Vec<Regressor>,
}

impl EquationView {
    pub fn n_regressors(&self) -> usize {
        self.labels.len()
    }

    /// Keeps only the listed regressor columns, in the given order.
    pub fn restrict(&self, columns: &[usize]) -> Self {
        Self {
            target: self.target,
            response: self.response.clone(),
            regressors: linalg::select_columns(&self.regressors, columns),
            labels: columns.iter().map(|&c| self.labels[c]).collect(),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            target: self.target,
            response: linalg::select_entries(&self.response, rows),
            regressors: linalg::select_rows(&self.regressors, rows),
            labels: self.labels.clone(),
        }
    }
}

/// Builds equation `i` (zero-based). Regressors are the other phenotypes in
/// trait order followed by all exogenous columns.
pub fn assemble_equation(
    y: &PhenotypeMatrix,
    x: &ExogenousMatrix,
    i: usize,
) -> Result<EquationView> {
    let m = y.n_traits();
    if i >= m {
        return Err(SemError::IndexOutOfRange { index: i, size: m });
    }
    if x.n() != y.n() {
        return Err(SemError::Dimension(format!(
            "{} phenotype rows vs {} exogenous rows",
            y.n(),
            x.n()
        )));
    }
    let mut labels: Vec<Regressor> = (0..m).filter(|&j| j != i).map(Regressor::Phenotype).collect();
    labels.extend((0..x.n_columns()).map(Regressor::Exogenous));
    let regressors = DMatrix::from_fn(y.n(), labels.len(), |r, c| match labels[c] {
        Regressor::Phenotype(j) => y.values()[(r, j)],
        Regressor::Exogenous(k) => x.values()[(r, k)],
    });
    Ok(EquationView {
        target: i,
        response: y.column(i),
        regressors,
        labels,
    })
}

/// Equation projected onto the instrument space.
///
/// With `G = X'X` (ridge-guarded), `A = W'X G⁻¹ X'W` and `c = W'X G⁻¹ X'y`,
/// the weighted least-squares loss is
/// `f(Δ) = (X'y - X'WΔ)' G⁻¹ (X'y - X'WΔ) = Δ'AΔ - 2c'Δ + y'P_X y`.
#[derive(Clone, Debug)]
pub struct ProjectedSystem {
    pub equation: usize,
    /// `X'W`, `K x p`.
    pub xtw: DMatrix<f64>,
    /// `X'y`, length `K`.
    pub xty: DVector<f64>,
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
    pub gram: GramFactor,
}

impl ProjectedSystem {
    pub fn new(eq: &EquationView, instr: &DMatrix<f64>) -> Result<Self> {
        let gram = GramFactor::new(&(instr.transpose() * instr))?;
        Self::with_gram(eq, instr, gram)
    }

    /// Reuses a factorization of `X'X` shared across equations.
    pub fn with_gram(eq: &EquationView, instr: &DMatrix<f64>, gram: GramFactor) -> Result<Self> {
        if instr.nrows() != eq.response.len() || eq.regressors.nrows() != eq.response.len() {
            return Err(SemError::Dimension(format!(
                "equation {} has {} rows, instruments {}",
                eq.target,
                eq.response.len(),
                instr.nrows()
            )));
        }
        if gram.dim() != instr.ncols() {
            return Err(SemError::Dimension("Gram factor does not match instruments".into()));
        }
        let xtw = instr.transpose() * &eq.regressors;
        let xty = instr.transpose() * &eq.response;
        Ok(Self::from_parts(eq.target, xtw, xty, gram))
    }

    /// Builds the system from precomputed `X'W`, `X'y` and a factor of `X'X`.
    pub fn from_parts(equation: usize, xtw: DMatrix<f64>, xty: DVector<f64>, gram: GramFactor) -> Self {
        let ginv_xtw = gram.solve(&xtw);
        let a = xtw.transpose() * &ginv_xtw;
        let a = (&a + a.transpose()) * 0.5;
        let c = ginv_xtw.transpose() * &xty;
        Self {
            equation,
            xtw,
            xty,
            a,
            c,
            gram,
        }
    }

    /// The same equation with only the listed regressor columns.
    pub fn restrict(&self, columns: &[usize]) -> Self {
        Self::from_parts(
            self.equation,
            linalg::select_columns(&self.xtw, columns),
            self.xty.clone(),
            self.gram.clone(),
        )
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// Smooth part `f(Δ)` of the penalized objective.
    pub fn loss(&self, delta: &DVector<f64>) -> f64 {
        let r = &self.xty - &self.xtw * delta;
        self.gram.quad_form(&r)
    }
}

/// Cross products `X'X` and `X'Y` shared by all equations of one data set.
#[derive(Clone, Debug)]
pub struct CrossProducts {
    pub gram: GramFactor,
    xtx: DMatrix<f64>,
    xty: DMatrix<f64>,
}

impl CrossProducts {
    pub fn new(y: &PhenotypeMatrix, x: &ExogenousMatrix) -> Result<Self> {
        if x.n() != y.n() {
            return Err(SemError::Dimension(format!(
                "{} phenotype rows vs {} exogenous rows",
                y.n(),
                x.n()
            )));
        }
        let xt = x.values().transpose();
        let xtx = &xt * x.values();
        let xty = &xt * y.values();
        Ok(Self {
            gram: GramFactor::new(&xtx)?,
            xtx,
            xty,
        })
    }

    /// Projected system of equation `i`, with the regressor order of [`assemble_equation`].
    pub fn system(&self, i: usize) -> Result<ProjectedSystem> {
        let m = self.xty.ncols();
        if i >= m {
            return Err(SemError::IndexOutOfRange { index: i, size: m });
        }
        let k = self.xtx.nrows();
        let mut xtw = DMatrix::zeros(k, m - 1 + k);
        for (c, j) in (0..m).filter(|&j| j != i).enumerate() {
            xtw.set_column(c, &self.xty.column(j));
        }
        xtw.columns_mut(m - 1, k).copy_from(&self.xtx);
        Ok(ProjectedSystem::from_parts(
            i,
            xtw,
            self.xty.column(i).into_owned(),
            self.gram.clone(),
        ))
    }
}

/// Generalized least-squares estimate `Δ̂ = A⁻¹c` for one equation.
///
/// Fails with [`SemError::SingularGram`] when the equation is not identified
/// by the instruments (e.g. the unrestricted `W_i = [Y_{-i} X]` with `M > 1`).
pub fn two_stage_least_squares(eq: &EquationView, x: &ExogenousMatrix) -> Result<DVector<f64>> {
    let system = ProjectedSystem::new(eq, x.values())?;
    two_stage_from_system(&system)
}

pub fn two_stage_from_system(system: &ProjectedSystem) -> Result<DVector<f64>> {
    linalg::solve_spd(&system.a, &system.c).ok_or(SemError::SingularGram {
        equation: system.equation,
    })
}

/// The same estimate computed through the explicit first stage:
/// `Ŵ = X (X'X)⁻¹ X'W`, then `Δ̂ = (Ŵ'Ŵ)⁻¹ Ŵ'y`.
pub fn two_stage_explicit(eq: &EquationView, x: &ExogenousMatrix) -> Result<DVector<f64>> {
    let instr = x.values();
    if instr.nrows() != eq.response.len() {
        return Err(SemError::Dimension("instrument rows".into()));
    }
    let gram = GramFactor::new(&(instr.transpose() * instr))?;
    let fitted = instr * gram.solve(&(instr.transpose() * &eq.regressors));
    let normal = fitted.transpose() * &fitted;
    let rhs = fitted.transpose() * &eq.response;
    linalg::solve_spd(&normal, &rhs).ok_or(SemError::SingularGram {
        equation: eq.target,
    })
}

/// `σ_ii = |y_i - W_i Δ̂_i|² / n`.
pub fn residual_variance(eq: &EquationView, delta: &DVector<f64>) -> Result<f64> {
    if delta.len() != eq.n_regressors() {
        return Err(SemError::Dimension(format!(
            "{} coefficients for {} regressors",
            delta.len(),
            eq.n_regressors()
        )));
    }
    let resid = &eq.response - &eq.regressors * delta;
    Ok(resid.norm_squared() / eq.response.len() as f64)
}

/// Estimated system `Γ`, `B` with per-equation residual variances.
#[derive(Clone, Debug)]
pub struct SemFit {
    /// `M x M`; column `i` is equation `i`, entry `(j, i)` is the edge `j -> i`.
    pub gamma: DMatrix<f64>,
    /// `K x M`; entry `(k, i)` is the edge from exogenous column `k` to trait `i`.
    pub beta: DMatrix<f64>,
    pub lambda: f64,
    pub per_equation_sigma: Vec<f64>,
    pub converged: Vec<bool>,
}

impl SemFit {
    /// Scatters per-equation coefficient vectors into `Γ` and `B`, applying
    /// the hard-zero threshold.
    pub fn from_equations(
        n_traits: usize,
        n_exogenous: usize,
        equations: &[(Vec<Regressor>, DVector<f64>)],
        lambda: f64,
        sigma: Vec<f64>,
        converged: Vec<bool>,
    ) -> Result<Self> {
        if equations.len() != n_traits {
            return Err(SemError::Dimension(format!(
                "{} equations for {} traits",
                equations.len(),
                n_traits
            )));
        }
        let mut gamma = DMatrix::zeros(n_traits, n_traits);
        let mut beta = DMatrix::zeros(n_exogenous, n_traits);
        for (i, (labels, coef)) in equations.iter().enumerate() {
            gamma[(i, i)] = -1.0;
            for (label, &v) in labels.iter().zip(coef.iter()) {
                let v = if v.abs() < HARD_ZERO { 0.0 } else { v };
                match *label {
                    Regressor::Phenotype(j) => gamma[(j, i)] = v,
                    Regressor::Exogenous(k) => beta[(k, i)] = v,
                }
            }
        }
        Ok(Self {
            gamma,
            beta,
            lambda,
            per_equation_sigma: sigma,
            converged,
        })
    }
}
