//! Sampling covariance of path coefficients, chi-square path tests and
//! stability selection.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::admm::AdmmSettings;
use crate::error::{Result, SemError};
use crate::linalg;
use crate::model::{
    residual_variance, EquationView, ExogenousMatrix, PhenotypeMatrix, ProjectedSystem, Regressor,
};
use crate::network::{estimate_network, EdgeKind, NetworkOptions, SourceGroup};

/// `Σ̂_i = σ_ii [W_i'X (X'X)⁻¹ X'W_i]⁻¹` for the regressors of `eq`.
#[derive(Clone, Debug)]
pub struct CoefficientCovariance {
    pub equation: usize,
    pub matrix: DMatrix<f64>,
    pub labels: Vec<Regressor>,
    /// The projected Gram was singular and a ridge was added before inversion.
    pub ridged: bool,
}

pub fn coefficient_covariance(
    eq: &EquationView,
    instr: &ExogenousMatrix,
    sigma_ii: f64,
) -> Result<CoefficientCovariance> {
    if !(sigma_ii >= 0.0) {
        return Err(SemError::InvalidInput(format!("residual variance {sigma_ii} is negative")));
    }
    let system = ProjectedSystem::new(eq, instr.values())?;
    let (inv, ridged) = projected_inverse(&system)?;
    Ok(CoefficientCovariance {
        equation: eq.target,
        matrix: inv * sigma_ii,
        labels: eq.labels.clone(),
        ridged,
    })
}

fn projected_inverse(system: &ProjectedSystem) -> Result<(DMatrix<f64>, bool)> {
    let (mut inv, ridged) = linalg::inverse_spd_guarded(&system.a)?;
    if ridged {
        warn!(
            "equation {}: projected Gram singular, covariance is ridge-guarded",
            system.equation
        );
    }
    let t = inv.transpose();
    inv += t;
    inv *= 0.5;
    Ok((inv, ridged))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathTestResult {
    pub label: String,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// `Λ` was singular; a pseudo-inverse was used and `dof` is its rank.
    pub rank_deficient: bool,
}

/// Upper-tail chi-square probability.
pub fn chi_square_sf(statistic: f64, dof: usize) -> f64 {
    if dof == 0 || !(statistic > 0.0) {
        return 1.0;
    }
    let dist = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
    dist.sf(statistic).clamp(0.0, 1.0)
}

/// `T_g = b' Λ⁻¹ b`, chi-square with `G = len(b)` degrees of freedom.
pub fn gene_path_test(label: &str, b: &DVector<f64>, lambda: &DMatrix<f64>) -> Result<PathTestResult> {
    let g = b.len();
    if lambda.shape() != (g, g) {
        return Err(SemError::Dimension(format!(
            "{}x{} covariance block for {} coefficients",
            lambda.nrows(),
            lambda.ncols(),
            g
        )));
    }
    if g == 0 {
        return Ok(PathTestResult {
            label: label.into(),
            statistic: 0.0,
            dof: 0,
            p_value: 1.0,
            rank_deficient: false,
        });
    }
    if let Some(inv) = linalg::inverse_spd(lambda) {
        let stat = b.dot(&(inv * b)).max(0.0);
        return Ok(PathTestResult {
            label: label.into(),
            statistic: stat,
            dof: g,
            p_value: chi_square_sf(stat, g),
            rank_deficient: false,
        });
    }
    let svd = lambda.clone().svd(true, true);
    let tol = 1e-10 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let pinv = svd
        .pseudo_inverse(tol)
        .map_err(|e| SemError::Singular(format!("pseudo-inverse: {e}")))?;
    let stat = b.dot(&(pinv * b)).max(0.0);
    warn!("{label}: singular covariance block, using pseudo-inverse with {rank} dof");
    Ok(PathTestResult {
        label: label.into(),
        statistic: stat,
        dof: rank,
        p_value: chi_square_sf(stat, rank),
        rank_deficient: true,
    })
}

/// `T_c = Δ̂² / var(Δ̂)`, chi-square with one degree of freedom.
pub fn single_path_test(label: &str, delta: f64, variance: f64) -> Result<PathTestResult> {
    if !(variance > 0.0) {
        return Err(SemError::InvalidInput(format!("{label}: variance must be positive, got {variance}")));
    }
    let stat = delta * delta / variance;
    Ok(PathTestResult {
        label: label.into(),
        statistic: stat,
        dof: 1,
        p_value: chi_square_sf(stat, 1),
        rank_deficient: false,
    })
}

/// Estimates and covariance for one equation restricted to its selected support.
#[derive(Clone, Debug)]
pub struct EquationInference {
    pub equation: usize,
    /// Selected regressor positions in the full equation.
    pub support: Vec<usize>,
    /// Full-length coefficient vector; zero off the support.
    pub coefficients: DVector<f64>,
    pub sigma: f64,
    /// Covariance over the support, in `support` order.
    pub covariance: DMatrix<f64>,
    pub ridged: bool,
}

impl EquationInference {
    fn position(&self, column: usize) -> Option<usize> {
        self.support.iter().position(|&s| s == column)
    }
}

/// Post-selection inference for one equation.
///
/// With `refit` the equation is re-estimated by unpenalized two-stage least
/// squares on the support of `sparse`; otherwise the penalized coefficients
/// are kept and only `σ_ii` and the covariance are computed.
pub fn infer_equation(
    eq: &EquationView,
    full: &ProjectedSystem,
    sparse: &DVector<f64>,
    refit: bool,
) -> Result<EquationInference> {
    if sparse.len() != eq.n_regressors() || full.dim() != eq.n_regressors() {
        return Err(SemError::Dimension("coefficient vector length".into()));
    }
    let support: Vec<usize> = (0..sparse.len()).filter(|&j| sparse[j] != 0.0).collect();
    let mut coefficients = DVector::zeros(sparse.len());
    if support.is_empty() {
        let sigma = residual_variance(eq, &coefficients)?;
        return Ok(EquationInference {
            equation: eq.target,
            support,
            coefficients,
            sigma,
            covariance: DMatrix::zeros(0, 0),
            ridged: false,
        });
    }
    let restricted = eq.restrict(&support);
    let system = full.restrict(&support);
    let (inv, ridged) = projected_inverse(&system)?;
    let local = if refit {
        &inv * &system.c
    } else {
        linalg::select_entries(sparse, &support)
    };
    for (k, &j) in support.iter().enumerate() {
        coefficients[j] = local[k];
    }
    let sigma = residual_variance(&restricted, &local)?;
    Ok(EquationInference {
        equation: eq.target,
        support,
        coefficients,
        sigma,
        covariance: inv * sigma,
        ridged,
    })
}

/// Test of one candidate edge into an equation's target trait.
#[derive(Clone, Debug)]
pub struct EdgeTest {
    pub kind: EdgeKind,
    /// Trait index for phenotype edges, group index for exogenous edges.
    pub source: usize,
    pub target: usize,
    /// Selected coefficients of the source (one for a trait or SNP, several for a gene).
    pub coefficients: Vec<f64>,
    /// Coefficient of the source's leading column; zero when that column was not selected.
    pub leading_coefficient: f64,
    pub test: PathTestResult,
}

/// Tests every selected source of an equation: `T_c` for phenotype
/// regressors, `T_g` over the selected columns of each exogenous group.
pub fn edge_tests(
    eq: &EquationView,
    inf: &EquationInference,
    groups: &[SourceGroup],
    trait_names: &[String],
) -> Result<Vec<EdgeTest>> {
    let mut out = Vec::new();
    let target = eq.target;
    let mut exo_pos: Vec<Option<usize>> = Vec::new();
    for (col, label) in eq.labels.iter().enumerate() {
        match *label {
            Regressor::Phenotype(j) => {
                if let Some(k) = inf.position(col) {
                    let var = inf.covariance[(k, k)];
                    let name = format!("{}->{}", trait_names[j], trait_names[target]);
                    let test = if var > 0.0 {
                        single_path_test(&name, inf.coefficients[col], var)?
                    } else {
                        degenerate_test(name)
                    };
                    out.push(EdgeTest {
                        kind: EdgeKind::Gamma,
                        source: j,
                        target,
                        coefficients: vec![inf.coefficients[col]],
                        leading_coefficient: inf.coefficients[col],
                        test,
                    });
                }
            }
            Regressor::Exogenous(k) => {
                if exo_pos.len() <= k {
                    exo_pos.resize(k + 1, None);
                }
                exo_pos[k] = Some(col);
            }
        }
    }
    for (g, group) in groups.iter().enumerate() {
        let cols: Vec<usize> = group
            .columns
            .clone()
            .filter_map(|k| exo_pos.get(k).copied().flatten())
            .collect();
        let selected: Vec<(usize, usize)> = cols
            .iter()
            .filter_map(|&c| inf.position(c).map(|p| (c, p)))
            .collect();
        if selected.is_empty() {
            continue;
        }
        let b = DVector::from_iterator(selected.len(), selected.iter().map(|&(c, _)| inf.coefficients[c]));
        let idx: Vec<usize> = selected.iter().map(|&(_, p)| p).collect();
        let block = linalg::select_block(&inf.covariance, &idx);
        let name = format!("{}->{}", group.name, trait_names[target]);
        let test = if block.diagonal().iter().all(|&v| v > 0.0) {
            gene_path_test(&name, &b, &block)?
        } else {
            degenerate_test(name)
        };
        let leading = cols.first().map_or(0.0, |&c| inf.coefficients[c]);
        out.push(EdgeTest {
            kind: EdgeKind::Beta,
            source: g,
            target,
            coefficients: b.iter().copied().collect(),
            leading_coefficient: leading,
            test,
        });
    }
    Ok(out)
}

/// Perfect in-sample fit leaves no variance to test against.
fn degenerate_test(label: String) -> PathTestResult {
    PathTestResult {
        label,
        statistic: f64::INFINITY,
        dof: 1,
        p_value: 0.0,
        rank_deficient: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleScheme {
    /// `n` rows drawn with replacement.
    Bootstrap,
    /// `n/2` rows drawn without replacement.
    Subsample,
}

#[derive(Clone, Debug)]
pub struct StabilityConfig {
    pub resamples: usize,
    pub freq_threshold: f64,
    pub p_threshold: f64,
    pub scheme: ResampleScheme,
    pub seed: u64,
    pub refit: bool,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            resamples: 100,
            freq_threshold: 0.8,
            p_threshold: 0.05,
            scheme: ResampleScheme::Bootstrap,
            seed: 1,
            refit: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityResult {
    pub kind: EdgeKind,
    pub source: usize,
    pub target: usize,
    pub source_name: String,
    pub target_name: String,
    pub selection_count: usize,
    pub resamples: usize,
    pub frequency: f64,
    pub kept: bool,
}

const MAX_REDRAWS: usize = 100;

/// Refits the network on resampled rows and counts, for every candidate
/// edge, how often it is selected with a path-test p-value below the
/// threshold. Edges are kept when their frequency exceeds `freq_threshold`.
///
/// Resample `b` draws from its own ChaCha stream `b` of `seed`, so results do
/// not depend on scheduling.
pub fn stability_selection(
    y: &PhenotypeMatrix,
    instr: &ExogenousMatrix,
    groups: &[SourceGroup],
    settings: &AdmmSettings,
    config: &StabilityConfig,
) -> Result<Vec<StabilityResult>> {
    if config.resamples == 0 {
        return Err(SemError::InvalidInput("at least one resample is required".into()));
    }
    for (name, v) in [("frequency", config.freq_threshold), ("p-value", config.p_threshold)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(SemError::InvalidInput(format!("{name} threshold {v} not in (0, 1)")));
        }
    }
    let n = y.n();
    let m = y.n_traits();
    let n_groups = groups.len();
    let options = NetworkOptions {
        refit: config.refit,
    };
    let counts: Vec<Result<Vec<(EdgeKind, usize, usize)>>> = (0..config.resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(b as u64);
            let rows = draw_rows(&mut rng, n, config.scheme, y, instr, b)?;
            let yb = y.select_rows(&rows);
            let xb = instr.select_rows(&rows);
            let net = estimate_network(&yb, &xb, groups, settings, &options)?;
            Ok(net
                .edges
                .iter()
                .filter(|e| e.p_value < config.p_threshold)
                .map(|e| (e.kind, e.source_index, e.target_index))
                .collect())
        })
        .collect();
    let mut gamma_counts = vec![vec![0usize; m]; m];
    let mut beta_counts = vec![vec![0usize; m]; n_groups];
    for r in counts {
        for (kind, s, t) in r? {
            match kind {
                EdgeKind::Gamma => gamma_counts[s][t] += 1,
                EdgeKind::Beta => beta_counts[s][t] += 1,
            }
        }
    }
    let names = y.names();
    let total = config.resamples as f64;
    let mut out = Vec::with_capacity(m * (m - 1) + n_groups * m);
    let mut push = |kind, s: usize, t: usize, source_name: &str, count: usize| {
        let frequency = count as f64 / total;
        out.push(StabilityResult {
            kind,
            source: s,
            target: t,
            source_name: source_name.to_string(),
            target_name: names[t].clone(),
            selection_count: count,
            resamples: config.resamples,
            frequency,
            kept: frequency > config.freq_threshold,
        });
    };
    for t in 0..m {
        for s in (0..m).filter(|&s| s != t) {
            push(EdgeKind::Gamma, s, t, &names[s], gamma_counts[s][t]);
        }
        for (g, group) in groups.iter().enumerate() {
            push(EdgeKind::Beta, g, t, &group.name, beta_counts[g][t]);
        }
    }
    Ok(out)
}

fn draw_rows(
    rng: &mut ChaCha8Rng,
    n: usize,
    scheme: ResampleScheme,
    y: &PhenotypeMatrix,
    instr: &ExogenousMatrix,
    index: usize,
) -> Result<Vec<usize>> {
    let informative: Vec<usize> = (0..instr.n_columns())
        .filter(|&k| !is_constant(instr.values(), k, None))
        .collect();
    for attempt in 0..MAX_REDRAWS {
        let rows: Vec<usize> = match scheme {
            ResampleScheme::Bootstrap => (0..n).map(|_| rng.random_range(0..n)).collect(),
            ResampleScheme::Subsample => {
                let mut rows = rand::seq::index::sample(rng, n, n / 2).into_vec();
                rows.sort_unstable();
                rows
            }
        };
        let degenerate = (0..y.n_traits()).any(|t| is_constant(y.values(), t, Some(&rows)))
            || informative.iter().any(|&k| is_constant(instr.values(), k, Some(&rows)));
        if !degenerate {
            return Ok(rows);
        }
        info!("resample {index}: constant column in draw {attempt}, redrawing");
    }
    Err(SemError::InvalidInput(format!(
        "resample {index}: no non-degenerate draw in {MAX_REDRAWS} attempts"
    )))
}

fn is_constant(m: &DMatrix<f64>, col: usize, rows: Option<&[usize]>) -> bool {
    let c = m.column(col);
    match rows {
        Some(rows) => rows.iter().all(|&r| c[r] == c[rows[0]]),
        None => c.iter().all(|&v| v == c[0]),
    }
}
