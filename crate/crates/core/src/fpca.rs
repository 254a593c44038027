//! Genotype profiles and functional principal component analysis per region.
//!
//! Positions inside a region are mapped to `[0, 1]` and integrals over the
//! region use trapezoidal weights on the observed variant grid. With
//! quadrature weights `w` and centered profiles `P` (`n x p`), the covariance
//! operator is discretized as `C W` with `C = P'P / n`; eigenfunctions come
//! from the symmetric problem `W^½ C W^½ ψ = μ ψ` with `φ = W^-½ ψ`, so that
//! `φ' W φ = I`. Scores are `η = P W φ`.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Result, SemError};
use crate::model::ExogenousMatrix;

/// Default cumulative-variance threshold for choosing the number of components.
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.8;

/// Relative size below which an eigenvalue counts as zero.
const ZERO_EIGENVALUE: f64 = 1e-12;

/// One biallelic variant. Genotype codes count copies of allele `Q` (0, 1, 2).
#[derive(Clone, Debug)]
pub struct VariantRecord {
    pub id: String,
    pub position: u64,
    /// Frequency of allele `Q`.
    pub allele_freq: f64,
    pub genotypes: Vec<u8>,
}

impl VariantRecord {
    /// Builds a record, estimating the allele frequency from the codes when `allele_freq` is `None`.
    pub fn new(id: impl Into<String>, position: u64, allele_freq: Option<f64>, genotypes: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if let Some(&g) = genotypes.iter().find(|&&g| g > 2) {
            return Err(SemError::InvalidInput(format!("variant {id}: genotype code {g} not in {{0,1,2}}")));
        }
        let allele_freq = match allele_freq {
            Some(p) => p,
            None => estimate_allele_freq(&genotypes),
        };
        Ok(Self {
            id,
            position,
            allele_freq,
            genotypes,
        })
    }

    pub fn is_polymorphic(&self) -> bool {
        self.genotypes.windows(2).any(|w| w[0] != w[1])
    }
}

pub fn estimate_allele_freq(genotypes: &[u8]) -> f64 {
    if genotypes.is_empty() {
        return f64::NAN;
    }
    genotypes.iter().map(|&g| g as f64).sum::<f64>() / (2.0 * genotypes.len() as f64)
}

/// Encodes a variant as `2P_q` (QQ), `P_q - P_Q` (Qq), `-2P_Q` (qq).
pub fn genotype_profile(variant: &VariantRecord) -> Result<DVector<f64>> {
    let pq_upper = variant.allele_freq;
    if !(pq_upper > 0.0 && pq_upper < 1.0) {
        return Err(SemError::InvalidInput(format!(
            "variant {}: allele frequency {} outside (0, 1)",
            variant.id, pq_upper
        )));
    }
    let pq_lower = 1.0 - pq_upper;
    let values = variant.genotypes.iter().map(|&g| match g {
        2 => 2.0 * pq_lower,
        1 => pq_lower - pq_upper,
        _ => -2.0 * pq_upper,
    });
    Ok(DVector::from_iterator(variant.genotypes.len(), values))
}

/// A gene or genomic region `[start, end]` with its variants in position order.
#[derive(Clone, Debug)]
pub struct Region {
    pub name: String,
    pub variants: Vec<VariantRecord>,
    pub interval: (u64, u64),
}

impl Region {
    pub fn new(name: impl Into<String>, variants: Vec<VariantRecord>, interval: (u64, u64)) -> Result<Self> {
        let name = name.into();
        if variants.is_empty() {
            return Err(SemError::InvalidInput(format!("region {name} has no variants")));
        }
        if interval.0 > interval.1 {
            return Err(SemError::InvalidInput(format!("region {name}: empty interval")));
        }
        if variants.windows(2).any(|w| w[1].position <= w[0].position) {
            return Err(SemError::InvalidInput(format!(
                "region {name}: positions must be strictly increasing"
            )));
        }
        if variants
            .iter()
            .any(|v| v.position < interval.0 || v.position > interval.1)
        {
            return Err(SemError::InvalidInput(format!(
                "region {name}: variant outside interval"
            )));
        }
        let n = variants[0].genotypes.len();
        if variants.iter().any(|v| v.genotypes.len() != n) {
            return Err(SemError::Dimension(format!(
                "region {name}: variants have different numbers of individuals"
            )));
        }
        Ok(Self {
            name,
            variants,
            interval,
        })
    }

    /// Region spanning exactly its first and last variant.
    pub fn from_variants(name: impl Into<String>, variants: Vec<VariantRecord>) -> Result<Self> {
        let interval = match (variants.first(), variants.last()) {
            (Some(a), Some(b)) => (a.position, b.position),
            _ => (0, 0),
        };
        Self::new(name, variants, interval)
    }

    pub fn n_individuals(&self) -> usize {
        self.variants.first().map_or(0, |v| v.genotypes.len())
    }

    /// Positions mapped to `[0, 1]` over the region interval.
    pub fn normalized_positions(&self) -> Vec<f64> {
        let (a, b) = self.interval;
        let span = (b - a) as f64;
        self.variants
            .iter()
            .map(|v| if span > 0.0 { (v.position - a) as f64 / span } else { 0.0 })
            .collect()
    }

    /// `n x p` matrix of genotype profiles.
    pub fn profile_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.n_individuals();
        let mut m = DMatrix::zeros(n, self.variants.len());
        for (j, v) in self.variants.iter().enumerate() {
            m.set_column(j, &genotype_profile(v)?);
        }
        Ok(m)
    }
}

/// Trapezoidal weights on a sorted grid; a single point gets weight 1.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let p = grid.len();
    match p {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..p)
            .map(|k| {
                let left = if k > 0 { grid[k] - grid[k - 1] } else { 0.0 };
                let right = if k + 1 < p { grid[k + 1] - grid[k] } else { 0.0 };
                0.5 * (left + right)
            })
            .collect(),
    }
}

#[derive(Clone, Debug)]
pub struct FpcaBasis {
    /// Normalized variant positions.
    pub grid: Vec<f64>,
    pub weights: Vec<f64>,
    /// `p x L` eigenfunctions sampled on the grid, orthonormal under `weights`.
    pub eigenfunctions: DMatrix<f64>,
    /// Descending, nonnegative.
    pub eigenvalues: Vec<f64>,
    /// `n x L` scores.
    pub scores: DMatrix<f64>,
    /// Share of total variance carried by the retained components.
    pub explained_fraction: f64,
    /// Column means removed from the profiles before the decomposition.
    pub profile_means: Vec<f64>,
    /// All profiles were constant; the basis carries one zero component and no scores.
    pub degenerate: bool,
}

impl FpcaBasis {
    pub fn n_components(&self) -> usize {
        self.scores.ncols()
    }

    /// `∫ x(t) φ_l(t) dt` for each component by quadrature over the grid.
    pub fn project(&self, profile: &DVector<f64>) -> DVector<f64> {
        let weighted = profile.component_mul(&DVector::from_column_slice(&self.weights));
        self.eigenfunctions.columns(0, self.n_components()).transpose() * weighted
    }

    /// `Σ_l η_il φ_l(t)` for every individual, `n x p`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let l = self.n_components();
        &self.scores * self.eigenfunctions.columns(0, l).transpose()
    }
}

/// FPCA of a region's genotype profiles. All components with positive
/// eigenvalue are kept; use [`select_components`] to truncate.
pub fn functional_pca(region: &Region) -> Result<FpcaBasis> {
    let profiles = region.profile_matrix()?;
    functional_pca_profiles(&region.normalized_positions(), &profiles)
}

/// FPCA of an `n x p` profile matrix sampled at `grid`.
pub fn functional_pca_profiles(grid: &[f64], profiles: &DMatrix<f64>) -> Result<FpcaBasis> {
    let (n, p) = profiles.shape();
    if n < 2 {
        return Err(SemError::InvalidInput(format!("FPCA needs at least 2 individuals, got {n}")));
    }
    if grid.len() != p || p == 0 {
        return Err(SemError::Dimension(format!("{} grid points for {} variants", grid.len(), p)));
    }
    let weights = trapezoid_weights(grid);
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(SemError::InvalidInput("grid points must be distinct".into()));
    }
    let means: Vec<f64> = profiles.column_iter().map(|c| c.mean()).collect();
    let mut centered = profiles.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    let sqrt_w = DVector::from_iterator(p, weights.iter().map(|w| w.sqrt()));
    let cov = centered.transpose() * &centered / n as f64;
    let scaled = DMatrix::from_fn(p, p, |r, c| sqrt_w[r] * cov[(r, c)] * sqrt_w[c]);
    let total: f64 = scaled.trace();
    if !(total > 0.0) {
        warn!("zero-variance region; no informative components");
        let mut phi = DMatrix::zeros(p, 1);
        phi[(0, 0)] = 1.0 / sqrt_w[0];
        return Ok(FpcaBasis {
            grid: grid.to_vec(),
            weights,
            eigenfunctions: phi,
            eigenvalues: vec![0.0],
            scores: DMatrix::zeros(n, 0),
            explained_fraction: 0.0,
            profile_means: means,
            degenerate: true,
        });
    }
    let eig = SymmetricEigen::new(scaled);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&k| eig.eigenvalues[k] > ZERO_EIGENVALUE * top)
        .take(n.min(p))
        .collect();
    let l = keep.len();
    let mut phi = DMatrix::zeros(p, l);
    let mut eigenvalues = Vec::with_capacity(l);
    for (col, &k) in keep.iter().enumerate() {
        let mut f = DVector::from_fn(p, |r, _| eig.eigenvectors[(r, k)] / sqrt_w[r]);
        if let Some(first) = f.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                f.neg_mut();
            }
        }
        phi.set_column(col, &f);
        eigenvalues.push(eig.eigenvalues[k].max(0.0));
    }
    let w_phi = DMatrix::from_fn(p, l, |r, c| weights[r] * phi[(r, c)]);
    let scores = &centered * w_phi;
    let explained_fraction = eigenvalues.iter().sum::<f64>() / total;
    Ok(FpcaBasis {
        grid: grid.to_vec(),
        weights,
        eigenfunctions: phi,
        eigenvalues,
        scores,
        explained_fraction,
        profile_means: means,
        degenerate: false,
    })
}

/// Keeps the smallest number of leading components whose cumulative
/// eigenvalue share reaches `threshold`.
pub fn select_components(basis: &FpcaBasis, threshold: f64) -> Result<FpcaBasis> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(SemError::InvalidInput(format!("variance threshold {threshold} not in (0, 1]")));
    }
    if basis.degenerate {
        return Ok(basis.clone());
    }
    let kept_total: f64 = basis.eigenvalues.iter().sum();
    let total = kept_total / basis.explained_fraction;
    let mut cumulative = 0.0;
    let mut l = basis.eigenvalues.len();
    for (i, ev) in basis.eigenvalues.iter().enumerate() {
        cumulative += ev;
        // Relative slack so that a threshold of 1.0 is met despite rounding.
        if cumulative >= threshold * total * (1.0 - 1e-12) {
            l = i + 1;
            break;
        }
    }
    Ok(FpcaBasis {
        grid: basis.grid.clone(),
        weights: basis.weights.clone(),
        eigenfunctions: basis.eigenfunctions.columns(0, l).into_owned(),
        eigenvalues: basis.eigenvalues[..l].to_vec(),
        scores: basis.scores.columns(0, l).into_owned(),
        explained_fraction: basis.eigenvalues[..l].iter().sum::<f64>() / total,
        profile_means: basis.profile_means.clone(),
        degenerate: false,
    })
}

/// Contiguous block of instrument columns belonging to one gene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneSpan {
    pub gene: String,
    pub columns: std::ops::Range<usize>,
}

/// Concatenated FPC scores of several regions.
#[derive(Clone, Debug)]
pub struct ScoreMatrix {
    pub eta: ExogenousMatrix,
    pub spans: Vec<GeneSpan>,
    pub bases: Vec<FpcaBasis>,
}

/// Runs FPCA for each region (in parallel), truncates at `threshold` and
/// stacks the scores column-wise in region order.
pub fn build_score_matrix(regions: &[Region], threshold: f64) -> Result<ScoreMatrix> {
    let n = regions.first().map_or(0, |r| r.n_individuals());
    if let Some(bad) = regions.iter().find(|r| r.n_individuals() != n) {
        return Err(SemError::Dimension(format!(
            "region {} has {} individuals, expected {}",
            bad.name,
            bad.n_individuals(),
            n
        )));
    }
    let bases: Vec<FpcaBasis> = regions
        .par_iter()
        .map(|r| functional_pca(r).and_then(|b| select_components(&b, threshold)))
        .collect::<Result<_>>()?;
    let total: usize = bases.iter().map(|b| b.n_components()).sum();
    let mut eta = DMatrix::zeros(n, total);
    let mut names = Vec::with_capacity(total);
    let mut spans = Vec::with_capacity(regions.len());
    let mut start = 0;
    for (region, basis) in regions.iter().zip(&bases) {
        let l = basis.n_components();
        if l > 0 {
            eta.columns_mut(start, l).copy_from(&basis.scores);
        }
        names.extend((1..=l).map(|c| format!("{}.pc{}", region.name, c)));
        spans.push(GeneSpan {
            gene: region.name.clone(),
            columns: start..start + l,
        });
        start += l;
    }
    Ok(ScoreMatrix {
        eta: ExogenousMatrix::new(eta, names)?,
        spans,
        bases,
    })
}
