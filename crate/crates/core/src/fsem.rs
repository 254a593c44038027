//! Gene-based functional SEM: FPC scores replace the variant matrix as
//! instruments, and each gene's coefficients expand into an effect function
//! over its region.

use nalgebra::{DMatrix, DVector};

use crate::admm::{fit_sem_with, AdmmSettings, SystemSolution};
use crate::error::{Result, SemError};
use crate::fpca::{build_score_matrix, FpcaBasis, GeneSpan, Region, ScoreMatrix};
use crate::model::{CrossProducts, PhenotypeMatrix};

#[derive(Clone, Debug)]
pub struct FsemFit {
    /// M×M, diagonal −1.
    pub gamma: DMatrix<f64>,
    /// `gene_coeffs[j][m]`: score coefficients of gene `j` in equation `m`.
    pub gene_coeffs: Vec<Vec<DVector<f64>>>,
    pub lambda: f64,
    pub per_equation_sigma: Vec<f64>,
    pub converged: Vec<bool>,
    pub spans: Vec<GeneSpan>,
    pub trait_names: Vec<String>,
}

impl FsemFit {
    pub fn from_solution(solution: &SystemSolution, spans: &[GeneSpan], trait_names: &[String]) -> Result<Self> {
        let fit = &solution.fit;
        let k = fit.beta.nrows();
        if spans.last().map_or(0, |s| s.columns.end) != k {
            return Err(SemError::Dimension(format!("gene spans do not cover {k} score columns")));
        }
        let m = fit.gamma.ncols();
        let gene_coeffs = spans
            .iter()
            .map(|s| {
                (0..m)
                    .map(|eq| DVector::from_iterator(s.columns.len(), s.columns.clone().map(|r| fit.beta[(r, eq)])))
                    .collect()
            })
            .collect();
        Ok(Self {
            gamma: fit.gamma.clone(),
            gene_coeffs,
            lambda: fit.lambda,
            per_equation_sigma: fit.per_equation_sigma.clone(),
            converged: fit.converged.clone(),
            spans: spans.to_vec(),
            trait_names: trait_names.to_vec(),
        })
    }

    pub fn gene_index(&self, gene: &str) -> Result<usize> {
        self.spans
            .iter()
            .position(|s| s.gene == gene)
            .ok_or_else(|| SemError::Unknown {
                kind: "gene",
                name: gene.to_string(),
            })
    }

    pub fn equation_index(&self, equation: &str) -> Result<usize> {
        self.trait_names
            .iter()
            .position(|t| t == equation)
            .ok_or_else(|| SemError::Unknown {
                kind: "trait",
                name: equation.to_string(),
            })
    }

    /// (gene, equation) pairs with at least one nonzero score coefficient.
    pub fn selected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (j, per_eq) in self.gene_coeffs.iter().enumerate() {
            for (m, b) in per_eq.iter().enumerate() {
                if b.iter().any(|&v| v != 0.0) {
                    out.push((j, m));
                }
            }
        }
        out
    }
}

/// Fits the functional SEM on raw regions, truncating each gene's basis at
/// `threshold` of explained variance. Returns the fit and the scores used.
pub fn fit_fsem(
    y: &PhenotypeMatrix,
    regions: &[Region],
    settings: &AdmmSettings,
    threshold: f64,
) -> Result<(FsemFit, ScoreMatrix)> {
    if let Some(r) = regions.iter().find(|r| r.n_individuals() != y.n()) {
        return Err(SemError::Dimension(format!(
            "region {} has {} individuals, phenotypes have {}",
            r.name,
            r.n_individuals(),
            y.n()
        )));
    }
    let scores = build_score_matrix(regions, threshold)?;
    let fit = fit_fsem_scores(y, &scores, settings)?;
    Ok((fit, scores))
}

/// Fits the functional SEM on precomputed scores.
pub fn fit_fsem_scores(y: &PhenotypeMatrix, scores: &ScoreMatrix, settings: &AdmmSettings) -> Result<FsemFit> {
    if scores.eta.n_columns() == 0 {
        return Err(SemError::InvalidInput("no gene has a nonzero score column".into()));
    }
    let cross = CrossProducts::new(y, &scores.eta)?;
    let solution = fit_sem_with(y, &scores.eta, &cross, settings)?;
    FsemFit::from_solution(&solution, &scores.spans, y.names())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectFunction {
    pub gene: String,
    pub equation: String,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

/// `β(t) = Σ_l b_l φ_l(t)` on the basis grid.
pub fn reconstruct_effect_function(fit: &FsemFit, basis: &FpcaBasis, gene: &str, equation: &str) -> Result<EffectFunction> {
    let j = fit.gene_index(gene)?;
    let m = fit.equation_index(equation)?;
    let b = &fit.gene_coeffs[j][m];
    effect_function_values(basis, b).map(|values| EffectFunction {
        gene: gene.to_string(),
        equation: equation.to_string(),
        grid: basis.grid.clone(),
        values,
    })
}

pub fn effect_function_values(basis: &FpcaBasis, b: &DVector<f64>) -> Result<Vec<f64>> {
    if b.len() != basis.n_components() {
        return Err(SemError::Dimension(format!(
            "{} coefficients for a basis of {} components",
            b.len(),
            basis.n_components()
        )));
    }
    if b.is_empty() {
        return Ok(vec![0.0; basis.grid.len()]);
    }
    Ok((&basis.eigenfunctions * b).iter().copied().collect())
}
