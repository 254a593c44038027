//! Random genotype-phenotype networks, synthetic data and structure-recovery
//! scoring over replicates.

use std::collections::HashSet;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::admm::{cross_validate_lambda, lambda_grid, system_lambda_max, AdmmSettings};
use crate::error::{Result, SemError};
use crate::fpca::{build_score_matrix, genotype_profile, Region, VariantRecord, DEFAULT_VARIANCE_THRESHOLD};
use crate::model::{ExogenousMatrix, PhenotypeMatrix};
use crate::network::{estimate_network, singleton_groups, span_groups, EdgeKind, NetworkEstimate, NetworkOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Independent variants, each its own source node.
    Snp,
    /// Variants grouped into genes; genes are the source nodes.
    Gene,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantClass {
    Common,
    Rare,
    Mixed,
    /// Explicit counts per source unit (all variants for `snp`, per gene for `gene`).
    Explicit { common: usize, rare: usize },
}

impl VariantClass {
    pub fn label(&self) -> String {
        match self {
            VariantClass::Common => "common".into(),
            VariantClass::Rare => "rare".into(),
            VariantClass::Mixed => "mixed".into(),
            VariantClass::Explicit { common, rare } => format!("c{common}r{rare}"),
        }
    }

    /// (common, rare) counts for a unit of `size` variants; mixed is one third common.
    pub fn counts(&self, size: usize) -> (usize, usize) {
        match *self {
            VariantClass::Common => (size, 0),
            VariantClass::Rare => (0, size),
            VariantClass::Mixed => {
                let c = size / 3;
                (c, size - c)
            }
            VariantClass::Explicit { common, rare } => (common, rare),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SnpSem,
    GeneFsem,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::SnpSem => "snp_sem",
            Method::GeneFsem => "gene_fsem",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    /// PD = N_true / N_detected.
    #[default]
    Paper,
    /// PD = N_true / N_truth.
    Recall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Detection {
    /// Nonzero coefficient and path-test p-value below the threshold.
    #[default]
    Pvalue,
    Nonzero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    /// Sample-size grid.
    pub n: Vec<usize>,
    #[serde(default = "defaults::traits")]
    pub traits: usize,
    #[serde(default = "defaults::layout")]
    pub layout: Layout,
    /// Variant count for the `snp` layout.
    #[serde(default = "defaults::variants")]
    pub variants: usize,
    #[serde(default = "defaults::genes")]
    pub genes: usize,
    #[serde(default = "defaults::variants_per_gene")]
    pub variants_per_gene: usize,
    #[serde(default = "defaults::classes")]
    pub variant_classes: Vec<VariantClass>,
    #[serde(default = "defaults::common_maf")]
    pub common_maf: (f64, f64),
    #[serde(default = "defaults::rare_maf")]
    pub rare_maf: (f64, f64),
    #[serde(default)]
    pub ld_blocks: bool,
    #[serde(default = "defaults::sparsity")]
    pub sparsity: f64,
    #[serde(default = "defaults::noise_sd")]
    pub noise_sd: f64,
    #[serde(default = "defaults::replicates")]
    pub replicates: usize,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    /// Defaults to `snp_sem` for the snp layout and both methods for genes.
    #[serde(default)]
    pub methods: Vec<Method>,
    /// Fixed λ; cross-validated per sample size when absent.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "defaults::cv_folds")]
    pub cv_folds: usize,
    #[serde(default = "defaults::cv_points")]
    pub cv_points: usize,
    #[serde(default)]
    pub recovery_mode: RecoveryMode,
    #[serde(default)]
    pub detection: Detection,
    #[serde(default = "defaults::p_threshold")]
    pub p_threshold: f64,
    #[serde(default = "defaults::variance_threshold")]
    pub variance_threshold: f64,
    #[serde(default = "defaults::refit")]
    pub refit: bool,
    #[serde(default = "defaults::rho")]
    pub rho: f64,
    #[serde(default = "defaults::max_iter")]
    pub max_iter: usize,
    #[serde(default = "defaults::tol")]
    pub tol: f64,
}

mod defaults {
    pub fn rho() -> f64 {
        1.0
    }
    use super::*;
    pub fn traits() -> usize {
        10
    }
    pub fn layout() -> Layout {
        Layout::Snp
    }
    pub fn variants() -> usize {
        30
    }
    pub fn genes() -> usize {
        10
    }
    pub fn variants_per_gene() -> usize {
        10
    }
    pub fn classes() -> Vec<VariantClass> {
        vec![VariantClass::Common, VariantClass::Rare, VariantClass::Mixed]
    }
    pub fn common_maf() -> (f64, f64) {
        (0.05, 0.5)
    }
    pub fn rare_maf() -> (f64, f64) {
        (0.001, 0.01)
    }
    pub fn sparsity() -> f64 {
        0.008
    }
    pub fn noise_sd() -> f64 {
        0.1
    }
    pub fn replicates() -> usize {
        100
    }
    pub fn seed() -> u64 {
        1
    }
    pub fn cv_folds() -> usize {
        5
    }
    pub fn cv_points() -> usize {
        50
    }
    pub fn p_threshold() -> f64 {
        0.05
    }
    pub fn variance_threshold() -> f64 {
        DEFAULT_VARIANCE_THRESHOLD
    }
    pub fn refit() -> bool {
        true
    }
    pub fn max_iter() -> usize {
        20_000
    }
    pub fn tol() -> f64 {
        1e-6
    }
}

impl SimulationSpec {
    /// Spec with every default and the given sample sizes.
    pub fn with_sizes(n: Vec<usize>) -> Self {
        toml::from_str::<Self>(&format!("n = {n:?}")).expect("defaults parse")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            SemError::Parse {
                line,
                message: e.message().to_string(),
            }
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SemError::InvalidInput(m));
        if self.n.is_empty() {
            return bad("empty sample-size grid".into());
        }
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return bad(format!("sparsity {} not in (0, 1)", self.sparsity));
        }
        if !(self.noise_sd > 0.0) {
            return bad(format!("noise_sd {} must be positive", self.noise_sd));
        }
        if self.traits < 2 {
            return bad("at least two traits are required".into());
        }
        if self.replicates == 0 {
            return bad("at least one replicate is required".into());
        }
        for (name, (lo, hi)) in [("common_maf", self.common_maf), ("rare_maf", self.rare_maf)] {
            if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
                return bad(format!("{name} range ({lo}, {hi}) not within (0, 0.5]"));
            }
        }
        if self.variant_classes.is_empty() {
            return bad("no variant classes".into());
        }
        if self.layout == Layout::Snp && self.methods().contains(&Method::GeneFsem) {
            return bad("gene_fsem needs the gene layout".into());
        }
        if !(self.p_threshold > 0.0 && self.p_threshold < 1.0) {
            return bad(format!("p_threshold {} not in (0, 1)", self.p_threshold));
        }
        if self.cv_folds < 2 && self.lambda.is_none() {
            return bad("cross-validation needs at least two folds".into());
        }
        self.settings(0.0).validate()
    }

    pub fn methods(&self) -> Vec<Method> {
        if !self.methods.is_empty() {
            return self.methods.clone();
        }
        match self.layout {
            Layout::Snp => vec![Method::SnpSem],
            Layout::Gene => vec![Method::SnpSem, Method::GeneFsem],
        }
    }

    pub fn settings(&self, lambda: f64) -> AdmmSettings {
        AdmmSettings {
            rho: self.rho,
            lambda,
            max_iter: self.max_iter,
            tol_primal: self.tol,
            tol_dual: self.tol,
        }
    }

    /// Number of source nodes (variants or genes).
    pub fn n_sources(&self) -> usize {
        match self.layout {
            Layout::Snp => self.variants,
            Layout::Gene => self.genes,
        }
    }

    /// Source unit of every variant.
    pub fn variant_sources(&self) -> Vec<usize> {
        match self.layout {
            Layout::Snp => (0..self.variants).collect(),
            Layout::Gene => (0..self.genes).flat_map(|g| std::iter::repeat_n(g, self.variants_per_gene)).collect(),
        }
    }
}

/// Edge identifier: kind, source (trait or source unit), target trait.
pub type EdgeId = (EdgeKind, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Structure {
    /// Random topological order of the traits.
    pub order: Vec<usize>,
    pub gamma_edges: Vec<(usize, usize)>,
    pub beta_edges: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub structure: Structure,
    /// M×M; `gamma[(j, i)]` is the edge j→i; diagonal −1.
    pub gamma: DMatrix<f64>,
    /// sources×M.
    pub beta: DMatrix<f64>,
}

impl GroundTruth {
    pub fn edges(&self) -> HashSet<EdgeId> {
        let s = &self.structure;
        s.gamma_edges
            .iter()
            .map(|&(j, i)| (EdgeKind::Gamma, j, i))
            .chain(s.beta_edges.iter().map(|&(k, i)| (EdgeKind::Beta, k, i)))
            .collect()
    }
}

/// Candidate pairs: trait pairs forward in the order, then every source→trait pair.
pub fn feasible_pairs(m: usize, n_sources: usize) -> usize {
    m * (m - 1) / 2 + n_sources * m
}

/// Random DAG over `m` traits plus source→trait edges; each feasible pair is
/// present with probability `sparsity`.
pub fn generate_structure<R: Rng>(m: usize, n_sources: usize, sparsity: f64, rng: &mut R) -> Structure {
    let mut order: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut gamma_edges = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            if rng.random::<f64>() < sparsity {
                gamma_edges.push((order[a], order[b]));
            }
        }
    }
    let mut beta_edges = Vec::new();
    for k in 0..n_sources {
        for i in 0..m {
            if rng.random::<f64>() < sparsity {
                beta_edges.push((k, i));
            }
        }
    }
    Structure {
        order,
        gamma_edges,
        beta_edges,
    }
}

fn signed_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let v = rng.random_range(lo..hi);
    if rng.random::<bool>() {
        v
    } else {
        -v
    }
}

/// Γ edge values from (0.5, 1) ∪ (−1, −0.5), B values from (0, 1) ∪ (−1, 0).
pub fn generate_parameters<R: Rng>(structure: &Structure, m: usize, n_sources: usize, rng: &mut R) -> Result<GroundTruth> {
    for _ in 0..100 {
        let mut gamma = -DMatrix::identity(m, m);
        for &(j, i) in &structure.gamma_edges {
            gamma[(j, i)] = signed_uniform(rng, 0.5, 1.0);
        }
        let mut beta = DMatrix::zeros(n_sources, m);
        for &(k, i) in &structure.beta_edges {
            // Open interval (0, 1): resample the measure-zero endpoint.
            let mut v = 0.0;
            while v == 0.0 {
                v = rng.random::<f64>();
            }
            beta[(k, i)] = if rng.random::<bool>() { v } else { -v };
        }
        if gamma.clone().lu().determinant().abs() > 1e-10 {
            return Ok(GroundTruth {
                structure: structure.clone(),
                gamma,
                beta,
            });
        }
    }
    Err(SemError::Singular("no invertible Γ in 100 draws".into()))
}

/// Per-variant minor allele frequencies for one unit of the given class.
pub fn draw_mafs<R: Rng>(class: &VariantClass, size: usize, common: (f64, f64), rare: (f64, f64), rng: &mut R) -> Vec<f64> {
    let (c, r) = class.counts(size);
    let draw = |rng: &mut R, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..hi) };
    let mut out: Vec<f64> = (0..c).map(|_| draw(rng, common)).collect();
    out.extend((0..r).map(|_| draw(rng, rare)));
    out
}

const LD_BLOCK: usize = 5;
const LD_CORRELATION: f64 = 0.5;

/// Genotype codes (minor-allele counts) under Hardy-Weinberg equilibrium;
/// `genotypes[v][i]` for variant `v`, individual `i`. With `ld_blocks`,
/// haplotype alleles within consecutive blocks of five variants are coupled
/// through an equicorrelated latent Gaussian.
pub fn generate_genotypes<R: Rng>(mafs: &[f64], n: usize, ld_blocks: bool, rng: &mut R) -> Vec<Vec<u8>> {
    let mut out = vec![vec![0u8; n]; mafs.len()];
    if !ld_blocks {
        for (v, &p) in mafs.iter().enumerate() {
            for i in 0..n {
                out[v][i] = (rng.random::<f64>() < p) as u8 + (rng.random::<f64>() < p) as u8;
            }
        }
        return out;
    }
    let normal = Normal::standard();
    let cut: Vec<f64> = mafs.iter().map(|&p| normal.inverse_cdf(p)).collect();
    let shared = LD_CORRELATION.sqrt();
    let own = (1.0 - LD_CORRELATION).sqrt();
    for i in 0..n {
        for _hap in 0..2 {
            for block in (0..mafs.len()).step_by(LD_BLOCK) {
                let common: f64 = StandardNormal.sample(rng);
                for v in block..(block + LD_BLOCK).min(mafs.len()) {
                    let e: f64 = StandardNormal.sample(rng);
                    if shared * common + own * e < cut[v] {
                        out[v][i] += 1;
                    }
                }
            }
        }
    }
    out
}

/// Phenotypes from `YΓ + XB + E = 0` with `E = −ε`, `ε ~ N(0, noise_sd²)`.
/// Returns `(Y, E)`.
pub fn generate_phenotypes<R: Rng>(
    x: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    noise_sd: f64,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = gamma.nrows();
    if gamma.ncols() != m || beta.ncols() != m || beta.nrows() != x.ncols() {
        return Err(SemError::Dimension(format!(
            "X {}x{}, B {}x{}, Γ {}x{}",
            x.nrows(),
            x.ncols(),
            beta.nrows(),
            beta.ncols(),
            gamma.nrows(),
            gamma.ncols()
        )));
    }
    let inv = gamma
        .clone()
        .try_inverse()
        .ok_or_else(|| SemError::Singular("Γ is not invertible".into()))?;
    let n = x.nrows();
    let eps = DMatrix::from_fn(n, m, |_, _| noise_sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
    let y = (eps.clone() - x * beta) * inv;
    Ok((y, -eps))
}

/// Pooled recovery counts over replicates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RecoveryCounts {
    pub detected: usize,
    pub true_detected: usize,
    pub truth: usize,
}

impl RecoveryCounts {
    pub fn add(&mut self, truth: &HashSet<EdgeId>, detected: &HashSet<EdgeId>) {
        self.detected += detected.len();
        self.true_detected += detected.intersection(truth).count();
        self.truth += truth.len();
    }

    pub fn false_detected(&self) -> usize {
        self.detected - self.true_detected
    }

    /// N_true / N̂_t; `None` when nothing was detected.
    pub fn precision(&self) -> Option<f64> {
        (self.detected > 0).then(|| self.true_detected as f64 / self.detected as f64)
    }

    /// N_false / N̂_t; `None` when nothing was detected.
    pub fn fdr(&self) -> Option<f64> {
        (self.detected > 0).then(|| self.false_detected() as f64 / self.detected as f64)
    }

    /// N_true / N_t; `None` when there were no true edges.
    pub fn recall(&self) -> Option<f64> {
        (self.truth > 0).then(|| self.true_detected as f64 / self.truth as f64)
    }

    pub fn pd(&self, mode: RecoveryMode) -> Option<f64> {
        match mode {
            RecoveryMode::Paper => self.precision(),
            RecoveryMode::Recall => self.recall(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recovery {
    pub pd: Option<f64>,
    pub fdr: Option<f64>,
    pub recall: Option<f64>,
    pub pd_pheno: Option<f64>,
    pub pd_geno: Option<f64>,
    pub all: RecoveryCounts,
}

/// Scores `(truth, detected)` edge sets pooled over replicates.
pub fn score_recovery(replicates: &[(HashSet<EdgeId>, HashSet<EdgeId>)], mode: RecoveryMode) -> Result<Recovery> {
    if replicates.is_empty() {
        return Err(SemError::InvalidInput("no replicates to score".into()));
    }
    let mut all = RecoveryCounts::default();
    let mut pheno = RecoveryCounts::default();
    let mut geno = RecoveryCounts::default();
    let split = |s: &HashSet<EdgeId>, k: EdgeKind| s.iter().filter(|e| e.0 == k).copied().collect::<HashSet<_>>();
    for (truth, detected) in replicates {
        all.add(truth, detected);
        pheno.add(&split(truth, EdgeKind::Gamma), &split(detected, EdgeKind::Gamma));
        geno.add(&split(truth, EdgeKind::Beta), &split(detected, EdgeKind::Beta));
    }
    Ok(Recovery {
        pd: all.pd(mode),
        fdr: all.fdr(),
        recall: all.recall(),
        pd_pheno: pheno.pd(mode),
        pd_geno: geno.pd(mode),
        all,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub n: usize,
    pub method: Method,
    pub variant_class: String,
    pub lambda: f64,
    pub recovery: Recovery,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateRecord {
    pub n: usize,
    pub method: Method,
    pub variant_class: String,
    pub replicate: usize,
    pub truth: Vec<EdgeId>,
    pub detected: Vec<EdgeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<CurveRow>,
    pub records: Vec<ReplicateRecord>,
}

/// Simulated data for one replicate at one sample size and variant class.
#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub y: PhenotypeMatrix,
    /// Genotype-profile matrix of the polymorphic variants.
    pub x: ExogenousMatrix,
    /// Source unit of each column of `x`.
    pub x_sources: Vec<usize>,
    pub regions: Vec<Region>,
    /// Source unit of each region.
    pub region_sources: Vec<usize>,
    /// True edges restricted to sources with at least one polymorphic variant.
    pub truth: HashSet<EdgeId>,
}

/// Independent deterministic seed for one `(tag, a, b, c)` cell.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_TRUTH: u64 = 1;
const TAG_DATA: u64 = 2;

pub fn replicate_truth(spec: &SimulationSpec, replicate: usize) -> Result<GroundTruth> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[TAG_TRUTH, replicate as u64]));
    let structure = generate_structure(spec.traits, spec.n_sources(), spec.sparsity, &mut rng);
    generate_parameters(&structure, spec.traits, spec.n_sources(), &mut rng)
}

/// Generates genotypes and phenotypes for one cell. A source edge acts with
/// the same coefficient through every variant of the source.
pub fn simulate_data(
    spec: &SimulationSpec,
    truth: &GroundTruth,
    n: usize,
    class_index: usize,
    replicate: usize,
) -> Result<SimulatedData> {
    let class = &spec.variant_classes[class_index];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed,
        &[TAG_DATA, replicate as u64, n as u64, class_index as u64],
    ));
    let mafs = match spec.layout {
        Layout::Snp => draw_mafs(class, spec.variants, spec.common_maf, spec.rare_maf, &mut rng),
        Layout::Gene => (0..spec.genes)
            .flat_map(|_| draw_mafs(class, spec.variants_per_gene, spec.common_maf, spec.rare_maf, &mut rng))
            .collect(),
    };
    let unit = spec.variant_sources();
    if mafs.len() != unit.len() {
        return Err(SemError::InvalidInput(format!(
            "variant class {} gives {} variants, layout expects {}",
            class.label(),
            mafs.len(),
            unit.len()
        )));
    }
    let genos = generate_genotypes(&mafs, n, spec.ld_blocks, &mut rng);
    let mut records = Vec::new();
    let mut x_sources = Vec::new();
    for (v, g) in genos.into_iter().enumerate() {
        let rec = VariantRecord::new(format!("v{v}"), 1000 + 100 * (v % spec.variants_per_gene.max(1)) as u64, None, g)?;
        if rec.is_polymorphic() {
            records.push(rec);
            x_sources.push(unit[v]);
        }
    }
    let mut x = DMatrix::zeros(n, records.len());
    for (c, rec) in records.iter().enumerate() {
        x.set_column(c, &genotype_profile(rec)?);
    }
    let variant_beta = DMatrix::from_fn(records.len(), spec.traits, |r, i| truth.beta[(x_sources[r], i)]);
    let (y_raw, _) = generate_phenotypes(&x, &truth.gamma, &variant_beta, spec.noise_sd, &mut rng)?;
    let trait_names: Vec<String> = (0..spec.traits).map(|i| format!("y{}", i + 1)).collect();
    let y = PhenotypeMatrix::standardized(y_raw, trait_names)?;
    let present: HashSet<usize> = x_sources.iter().copied().collect();
    let truth_set = truth
        .edges()
        .into_iter()
        .filter(|e| e.0 == EdgeKind::Gamma || present.contains(&e.1))
        .collect();
    let names: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let (regions, region_sources) = match spec.layout {
        Layout::Snp => (Vec::new(), Vec::new()),
        Layout::Gene => {
            let mut regions = Vec::new();
            let mut sources = Vec::new();
            for g in 0..spec.genes {
                let vars: Vec<VariantRecord> = records
                    .iter()
                    .zip(&x_sources)
                    .filter(|(_, &s)| s == g)
                    .map(|(r, _)| r.clone())
                    .collect();
                if !vars.is_empty() {
                    regions.push(Region::new(format!("gene{}", g + 1), vars, (1000, 1000 + 100 * spec.variants_per_gene as u64))?);
                    sources.push(g);
                }
            }
            (regions, sources)
        }
    };
    Ok(SimulatedData {
        y,
        x: ExogenousMatrix::new(x, names)?,
        x_sources,
        regions,
        region_sources,
        truth: truth_set,
    })
}

/// Instruments, source groups and the source unit of each group for `method`.
fn method_inputs(
    spec: &SimulationSpec,
    data: &SimulatedData,
    method: Method,
) -> Result<(ExogenousMatrix, Vec<crate::network::SourceGroup>, Vec<usize>)> {
    match method {
        Method::SnpSem => Ok((data.x.clone(), singleton_groups(&data.x), data.x_sources.clone())),
        Method::GeneFsem => {
            let scores = build_score_matrix(&data.regions, spec.variance_threshold)?;
            let groups = span_groups(&scores.spans);
            Ok((scores.eta, groups, data.region_sources.clone()))
        }
    }
}

/// Detected edges in source-unit coordinates; a multi-variant source is
/// detected when any of its groups is.
pub fn detected_edges(
    net: &NetworkEstimate,
    group_sources: &[usize],
    detection: Detection,
    p_threshold: f64,
) -> HashSet<EdgeId> {
    net.edges
        .iter()
        .filter(|e| detection == Detection::Nonzero || e.p_value < p_threshold)
        .map(|e| match e.kind {
            EdgeKind::Gamma => (EdgeKind::Gamma, e.source_index, e.target_index),
            EdgeKind::Beta => (EdgeKind::Beta, group_sources[e.source_index], e.target_index),
        })
        .collect()
}

fn choose_lambda(spec: &SimulationSpec, y: &PhenotypeMatrix, x: &ExogenousMatrix, seed: u64) -> Result<f64> {
    if let Some(l) = spec.lambda {
        return Ok(l);
    }
    let lmax = system_lambda_max(y, x)?;
    if lmax == 0.0 {
        return Ok(0.0);
    }
    let grid = lambda_grid(lmax, spec.cv_points);
    let cv = cross_validate_lambda(y, x, &grid, spec.cv_folds, seed, &spec.settings(0.0))?;
    Ok(cv.lambda)
}

/// Runs every (n, variant class, method) cell over all replicates and scores
/// recovery. λ is cross-validated once per cell on replicate 0.
pub fn run_experiment(spec: &SimulationSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let truths: Vec<GroundTruth> = (0..spec.replicates)
        .into_par_iter()
        .map(|r| replicate_truth(spec, r))
        .collect::<Result<_>>()?;
    let methods = spec.methods();
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &n in &spec.n {
        for (ci, class) in spec.variant_classes.iter().enumerate() {
            let data0 = simulate_data(spec, &truths[0], n, ci, 0)?;
            let mut lambdas = Vec::with_capacity(methods.len());
            for &method in &methods {
                let (x, _, _) = method_inputs(spec, &data0, method)?;
                let cv_seed = derive_seed(spec.seed, &[3, n as u64, ci as u64]);
                let lambda = choose_lambda(spec, &data0.y, &x, cv_seed)?;
                info!("n={n} class={} method={}: λ = {lambda:.6e}", class.label(), method.as_str());
                lambdas.push(lambda);
            }
            let per_rep: Vec<Vec<(HashSet<EdgeId>, HashSet<EdgeId>)>> = (0..spec.replicates)
                .into_par_iter()
                .map(|r| {
                    let data = if r == 0 {
                        data0.clone()
                    } else {
                        simulate_data(spec, &truths[r], n, ci, r)?
                    };
                    methods
                        .iter()
                        .zip(&lambdas)
                        .map(|(&method, &lambda)| {
                            let (x, groups, sources) = method_inputs(spec, &data, method)?;
                            let net = estimate_network(
                                &data.y,
                                &x,
                                &groups,
                                &spec.settings(lambda),
                                &NetworkOptions { refit: spec.refit },
                            )?;
                            if !net.unconverged.is_empty() {
                                warn!(
                                    "replicate {r}, n={n}, {}: {} equations did not converge",
                                    method.as_str(),
                                    net.unconverged.len()
                                );
                            }
                            Ok((data.truth.clone(), detected_edges(&net, &sources, spec.detection, spec.p_threshold)))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            for (mi, &method) in methods.iter().enumerate() {
                let pairs: Vec<(HashSet<EdgeId>, HashSet<EdgeId>)> = per_rep.iter().map(|v| v[mi].clone()).collect();
                let recovery = score_recovery(&pairs, spec.recovery_mode)?;
                rows.push(CurveRow {
                    n,
                    method,
                    variant_class: class.label(),
                    lambda: lambdas[mi],
                    recovery,
                    replicates: spec.replicates,
                    seed: spec.seed,
                });
                for (r, (truth, det)) in pairs.into_iter().enumerate() {
                    records.push(ReplicateRecord {
                        n,
                        method,
                        variant_class: class.label(),
                        replicate: r,
                        truth: sorted(truth),
                        detected: sorted(det),
                    });
                }
            }
        }
    }
    Ok(ExperimentResult { rows, records })
}

fn sorted(set: HashSet<EdgeId>) -> Vec<EdgeId> {
    let mut v: Vec<EdgeId> = set.into_iter().collect();
    v.sort();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_defaults_and_line_numbers() {
        let s = SimulationSpec::from_toml("n = [200]\nreplicates = 1\n").unwrap();
        assert_eq!(s.traits, 10);
        assert_eq!(s.sparsity, 0.008);
        let err = SimulationSpec::from_toml("n = [200]\nreplicates = 1\nsparsity = \"x\"\n").unwrap_err();
        assert!(matches!(err, SemError::Parse { line: 3, .. }), "{err:?}");
        assert!(SimulationSpec::from_toml("n = [200]\nbogus = 1\n").is_err());
        assert!(SimulationSpec::from_toml("n = [200]\nnoise_sd = -1.0\n").is_err());
    }

    #[test]
    fn explicit_class_parses() {
        let s = SimulationSpec::from_toml("n = [100]\nvariant_classes = [\"common\", { explicit = { common = 5, rare = 25 } }]\n").unwrap();
        assert_eq!(s.variant_classes[1].counts(30), (5, 25));
        assert_eq!(s.variant_classes[1].label(), "c5r25");
    }

    #[test]
    fn complete_dag_at_full_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = generate_structure(6, 2, 1.0, &mut rng);
        assert_eq!(s.gamma_edges.len(), 15);
        assert_eq!(s.beta_edges.len(), 12);
        let pos: Vec<usize> = (0..6).map(|t| s.order.iter().position(|&o| o == t).unwrap()).collect();
        assert!(s.gamma_edges.iter().all(|&(j, i)| pos[j] < pos[i]));
    }

    #[test]
    fn noiseless_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = generate_structure(4, 3, 0.6, &mut rng);
        let t = generate_parameters(&s, 4, 3, &mut rng).unwrap();
        let x = DMatrix::from_fn(20, 3, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let (y, e) = generate_phenotypes(&x, &t.gamma, &t.beta, 0.0, &mut rng).unwrap();
        assert!((&y * &t.gamma + &x * &t.beta).amax() < 1e-12);
        assert_eq!(e.amax(), 0.0);
        let (y, _) = generate_phenotypes(&x, &-DMatrix::identity(4, 4), &t.beta, 0.0, &mut rng).unwrap();
        assert!((y - &x * &t.beta).amax() < 1e-12);
    }

    #[test]
    fn recovery_arithmetic() {
        let truth: HashSet<EdgeId> = (0..90).map(|k| (EdgeKind::Beta, k, 0)).collect();
        let mut det = truth.clone();
        det.extend((0..10).map(|k| (EdgeKind::Gamma, k, 1)));
        let r = score_recovery(&[(truth.clone(), det)], RecoveryMode::Paper).unwrap();
        assert_eq!(r.pd, Some(0.9));
        assert!((r.fdr.unwrap() - 0.1).abs() < 1e-15);
        let none = score_recovery(&[(truth, HashSet::new())], RecoveryMode::Paper).unwrap();
        assert_eq!(none.pd, None);
        assert_eq!(none.fdr, None);
        assert_eq!(none.recall, Some(0.0));
    }

    #[test]
    fn seeds_are_distinct() {
        let a = derive_seed(1, &[1, 0]);
        let b = derive_seed(1, &[1, 1]);
        let c = derive_seed(2, &[1, 0]);
        assert!(a != b && a != c && b != c);
    }
}
