//! Fitted genotype-phenotype network: sparse fit plus per-edge path tests.

use std::ops::Range;

use rayon::prelude::*;

use crate::admm::{fit_sem_with, AdmmSettings, SystemSolution};
use crate::error::{Result, SemError};
use crate::fpca::GeneSpan;
use crate::inference::{edge_tests, infer_equation};
use crate::model::{CrossProducts, ExogenousMatrix, PhenotypeMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    /// Phenotype to phenotype.
    Gamma,
    /// Genotype (SNP or gene) to phenotype.
    Beta,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Gamma => "gamma",
            EdgeKind::Beta => "beta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(EdgeKind::Gamma),
            "beta" => Ok(EdgeKind::Beta),
            other => Err(SemError::InvalidInput(format!("unknown edge kind '{other}'"))),
        }
    }
}

/// Exogenous columns that together form one source node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceGroup {
    pub name: String,
    pub columns: Range<usize>,
}

/// One node per exogenous column (variant-level model).
pub fn singleton_groups(x: &ExogenousMatrix) -> Vec<SourceGroup> {
    x.names()
        .iter()
        .enumerate()
        .map(|(k, name)| SourceGroup {
            name: name.clone(),
            columns: k..k + 1,
        })
        .collect()
}

/// One node per gene (functional model).
pub fn span_groups(spans: &[GeneSpan]) -> Vec<SourceGroup> {
    spans
        .iter()
        .map(|s| SourceGroup {
            name: s.gene.clone(),
            columns: s.columns.clone(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeEstimate {
    pub source: String,
    pub target: String,
    pub kind: EdgeKind,
    /// Trait index (gamma) or source-group index (beta).
    pub source_index: usize,
    pub target_index: usize,
    /// Path coefficient; for a multi-column source, the leading column's coefficient.
    pub coefficient: f64,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

#[derive(Clone, Debug)]
pub struct NetworkEstimate {
    pub trait_names: Vec<String>,
    pub source_names: Vec<String>,
    pub lambda: f64,
    /// Every edge with a nonzero penalized coefficient, tested.
    pub edges: Vec<EdgeEstimate>,
    /// Equations whose ADMM run hit the iteration limit.
    pub unconverged: Vec<usize>,
}

impl NetworkEstimate {
    /// Edges with p-value below `p_threshold`.
    pub fn significant(&self, p_threshold: f64) -> impl Iterator<Item = &EdgeEstimate> {
        self.edges.iter().filter(move |e| e.p_value < p_threshold)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NetworkOptions {
    /// Refit the selected support by unpenalized 2SLS before testing.
    pub refit: bool,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        Self { refit: true }
    }
}

/// Sparse fit of every equation followed by path tests on the selected edges.
pub fn estimate_network(
    y: &PhenotypeMatrix,
    instr: &ExogenousMatrix,
    groups: &[SourceGroup],
    settings: &AdmmSettings,
    options: &NetworkOptions,
) -> Result<NetworkEstimate> {
    let cross = CrossProducts::new(y, instr)?;
    let solution = fit_sem_with(y, instr, &cross, settings)?;
    network_from_solution(y, &cross, &solution, groups, options)
}

pub fn network_from_solution(
    y: &PhenotypeMatrix,
    cross: &CrossProducts,
    solution: &SystemSolution,
    groups: &[SourceGroup],
    options: &NetworkOptions,
) -> Result<NetworkEstimate> {
    let names = y.names();
    let per_eq: Vec<Result<Vec<EdgeEstimate>>> = solution
        .equations
        .par_iter()
        .zip(solution.solutions.par_iter())
        .map(|(eq, sol)| {
            let system = cross.system(eq.target)?;
            let inf = infer_equation(eq, &system, &sol.coefficients, options.refit)?;
            let tests = edge_tests(eq, &inf, groups, names)?;
            Ok(tests
                .into_iter()
                .map(|t| EdgeEstimate {
                    source: match t.kind {
                        EdgeKind::Gamma => names[t.source].clone(),
                        EdgeKind::Beta => groups[t.source].name.clone(),
                    },
                    target: names[t.target].clone(),
                    kind: t.kind,
                    source_index: t.source,
                    target_index: t.target,
                    coefficient: t.leading_coefficient,
                    statistic: t.test.statistic,
                    dof: t.test.dof,
                    p_value: t.test.p_value,
                })
                .collect())
        })
        .collect();
    let mut edges = Vec::new();
    for e in per_eq {
        edges.extend(e?);
    }
    Ok(NetworkEstimate {
        trait_names: names.to_vec(),
        source_names: groups.iter().map(|g| g.name.clone()).collect(),
        lambda: solution.fit.lambda,
        edges,
        unconverged: solution
            .solutions
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.state.converged)
            .map(|(i, _)| i)
            .collect(),
    })
}
