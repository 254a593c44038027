//! Command-line front end: argument parsing, run configuration and the five
//! subcommands. `main.rs` only maps errors to exit codes.

use std::fmt::Debug;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use sparsesem::admm::{cross_validate_lambda, lambda_grid, system_lambda_max, CvResult};
use sparsesem::effects::{all_effect_reports, break_cycles_weaker_edge, NodeData, NodeKind};
use sparsesem::fpca::{build_score_matrix, functional_pca};
use sparsesem::inference::{stability_selection, ResampleScheme, StabilityConfig};
use sparsesem::io::{self, Provenance, TestRow};
use sparsesem::network::{estimate_network, singleton_groups, span_groups, NetworkOptions};
use sparsesem::simulation::{RecoveryMode, SimulationSpec};
use sparsesem::{AdmmSettings, CausalGraph, DVector, ExogenousMatrix, PhenotypeMatrix, SemError, SourceGroup};

pub const TOOL: &str = "sparsesem";

#[derive(Parser, Debug)]
#[command(name = "sparsesem", version, about = "Sparse SEM network inference for genotype-phenotype data")]
pub struct Cli {
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a structure-recovery experiment and write the PD/FDR curve.
    Simulate(SimulateArgs),
    /// Fit a network and write the significant edges and a DOT graph.
    Fit(FitArgs),
    /// Fit a network and write path tests for every candidate edge.
    Test(TestArgs),
    /// Stability selection over resampled fits.
    Stability(StabilityArgs),
    /// Direct, indirect, total and marginal effects of a fitted network.
    Effects(EffectsArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Experiment spec (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, value_enum)]
    pub recovery_mode: Option<RecoveryArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RecoveryArg {
    Paper,
    Recall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    #[value(name = "snp_sem")]
    SnpSem,
    #[value(name = "gene_fsem")]
    GeneFsem,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeArg {
    Bootstrap,
    Subsample,
}

/// Options shared by `fit`, `test` and `stability`. Flags override the
/// `--config` file, which overrides the defaults.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Run configuration (TOML) with the same keys as the long flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Phenotype TSV: one row per individual, header = trait names.
    #[arg(long)]
    pub phenotypes: Option<PathBuf>,
    /// Genotype TSV: variant_id, gene, position, allele_freq_Q, codes...
    #[arg(long)]
    pub genotypes: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Fixed penalty; cross-validated when absent.
    #[arg(long, conflicts_with = "cv")]
    pub lambda: Option<f64>,
    /// Cross-validate λ even if the config fixes it.
    #[arg(long)]
    pub cv: bool,
    #[arg(long)]
    pub cv_folds: Option<usize>,
    #[arg(long)]
    pub cv_points: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Inverse-rank-normal transform each phenotype on input.
    #[arg(long)]
    pub irn: bool,
    /// Keep the sparse coefficients instead of refitting the support.
    #[arg(long)]
    pub no_refit: bool,
    #[arg(long)]
    pub p_threshold: Option<f64>,
    /// Explained-variance cut for gene FPCA.
    #[arg(long)]
    pub variance_threshold: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct TestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Add stability frequencies from this many resamples.
    #[arg(long)]
    pub resamples: Option<usize>,
}

#[derive(Args, Debug)]
pub struct StabilityArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub resamples: Option<usize>,
    #[arg(long)]
    pub freq_threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
}

#[derive(Args, Debug)]
pub struct EffectsArgs {
    /// Edge list written by `fit`.
    #[arg(long)]
    pub edges: PathBuf,
    /// Phenotypes for marginal effects.
    #[arg(long)]
    pub phenotypes: Option<PathBuf>,
    /// Genotypes for marginal effects of gene or variant nodes.
    #[arg(long)]
    pub genotypes: Option<PathBuf>,
    #[arg(long)]
    pub irn: bool,
    #[arg(long, value_enum)]
    pub break_cycles: Option<BreakCycles>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BreakCycles {
    WeakerEdge,
}

/// Keys accepted in a `--config` run file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub phenotypes: Option<PathBuf>,
    pub genotypes: Option<PathBuf>,
    pub method: Option<MethodArg>,
    pub lambda: Option<f64>,
    pub cv_folds: Option<usize>,
    pub cv_points: Option<usize>,
    pub seed: Option<u64>,
    pub irn: Option<bool>,
    pub refit: Option<bool>,
    pub p_threshold: Option<f64>,
    pub variance_threshold: Option<f64>,
    pub rho: Option<f64>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub out: Option<PathBuf>,
    pub resamples: Option<usize>,
    pub freq_threshold: Option<f64>,
    pub scheme: Option<SchemeArg>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, SemError> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            SemError::Parse {
                line,
                message: e.message().to_string(),
            }
        })
    }
}

/// Fully resolved settings of a data run; its `Debug` text, minus the output
/// directory, is hashed into every output header.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub phenotypes: PathBuf,
    pub genotypes: Option<PathBuf>,
    pub method: MethodArg,
    pub lambda: Option<f64>,
    pub cv_folds: usize,
    pub cv_points: usize,
    pub seed: u64,
    pub irn: bool,
    pub refit: bool,
    pub p_threshold: f64,
    pub variance_threshold: f64,
    pub rho: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub out: PathBuf,
    pub resamples: usize,
    pub freq_threshold: f64,
    pub scheme: SchemeArg,
}

impl Resolved {
    fn provenance<T: Debug>(&self, extra: T) -> Provenance {
        let keyed = Resolved {
            out: PathBuf::new(),
            ..self.clone()
        };
        provenance(self.seed, &(keyed, extra))
    }

    fn settings(&self, lambda: f64) -> AdmmSettings {
        AdmmSettings {
            rho: self.rho,
            lambda,
            max_iter: self.max_iter,
            tol_primal: self.tol,
            tol_dual: self.tol,
        }
    }

    fn stability(&self) -> StabilityConfig {
        StabilityConfig {
            resamples: self.resamples,
            freq_threshold: self.freq_threshold,
            p_threshold: self.p_threshold,
            scheme: match self.scheme {
                SchemeArg::Bootstrap => ResampleScheme::Bootstrap,
                SchemeArg::Subsample => ResampleScheme::Subsample,
            },
            seed: self.seed,
            refit: self.refit,
        }
    }
}

pub fn resolve(args: &DataArgs, resamples: Option<usize>, freq: Option<f64>, scheme: Option<SchemeArg>) -> Result<Resolved> {
    let file = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_toml(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let lambda = if args.cv { None } else { args.lambda.or(file.lambda) };
    let resolved = Resolved {
        phenotypes: args
            .phenotypes
            .clone()
            .or(file.phenotypes)
            .ok_or_else(|| SemError::InvalidInput("--phenotypes is required".into()))?,
        genotypes: args.genotypes.clone().or(file.genotypes),
        method: args.method.or(file.method).unwrap_or(MethodArg::SnpSem),
        lambda,
        cv_folds: args.cv_folds.or(file.cv_folds).unwrap_or(5),
        cv_points: args.cv_points.or(file.cv_points).unwrap_or(50),
        seed: args.seed.or(file.seed).unwrap_or(1),
        irn: args.irn || file.irn.unwrap_or(false),
        refit: !args.no_refit && file.refit.unwrap_or(true),
        p_threshold: args.p_threshold.or(file.p_threshold).unwrap_or(0.05),
        variance_threshold: args.variance_threshold.or(file.variance_threshold).unwrap_or(0.8),
        rho: args.rho.or(file.rho).unwrap_or(1.0),
        max_iter: args.max_iter.or(file.max_iter).unwrap_or(20_000),
        tol: args.tol.or(file.tol).unwrap_or(1e-6),
        out: args
            .out
            .clone()
            .or(file.out)
            .ok_or_else(|| SemError::InvalidInput("--out is required".into()))?,
        resamples: resamples.or(file.resamples).unwrap_or(100),
        freq_threshold: freq.or(file.freq_threshold).unwrap_or(0.8),
        scheme: scheme.or(file.scheme).unwrap_or(SchemeArg::Bootstrap),
    };
    if let Some(l) = resolved.lambda {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(SemError::InvalidInput(format!("lambda {l} must be finite and nonnegative")).into());
        }
    }
    if resolved.cv_points == 0 {
        return Err(SemError::InvalidInput("cv_points must be positive".into()).into());
    }
    resolved.settings(0.0).validate()?;
    Ok(resolved)
}

pub fn config_hash<T: Debug>(config: &T) -> String {
    let digest = Sha256::digest(format!("{config:?}").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn provenance<T: Debug>(seed: u64, config: &T) -> Provenance {
    Provenance {
        tool: TOOL.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config_hash: config_hash(config),
    }
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

/// Phenotypes, instruments and source groups ready for fitting.
pub struct Prepared {
    pub y: PhenotypeMatrix,
    pub instr: Option<ExogenousMatrix>,
    pub groups: Vec<SourceGroup>,
}

fn read_traits(path: &Path, irn: bool) -> Result<PhenotypeMatrix> {
    let table = io::read_phenotypes(open(path)?, irn).with_context(|| format!("in {}", path.display()))?;
    let t = table.traits;
    Ok(PhenotypeMatrix::standardized(t.values().clone(), t.names().to_vec())?)
}

pub fn prepare(cfg: &Resolved) -> Result<Prepared> {
    let y = read_traits(&cfg.phenotypes, cfg.irn)?;
    let Some(gpath) = &cfg.genotypes else {
        return Ok(Prepared {
            y,
            instr: None,
            groups: Vec::new(),
        });
    };
    let table = io::read_genotypes(open(gpath)?).with_context(|| format!("in {}", gpath.display()))?;
    if !table.dropped.is_empty() {
        warn!("{} monomorphic variants dropped", table.dropped.len());
    }
    if table.variants.is_empty() {
        return Ok(Prepared {
            y,
            instr: None,
            groups: Vec::new(),
        });
    }
    if table.n_individuals() != y.n() {
        bail!(SemError::Dimension(format!(
            "{} individuals in {}, {} in {}",
            table.n_individuals(),
            gpath.display(),
            y.n(),
            cfg.phenotypes.display()
        )));
    }
    let (instr, groups) = match cfg.method {
        MethodArg::SnpSem => {
            let x = table.profile_matrix()?;
            let groups = singleton_groups(&x);
            (x, groups)
        }
        MethodArg::GeneFsem => {
            let scores = build_score_matrix(&table.regions()?, cfg.variance_threshold)?;
            (scores.eta.clone(), span_groups(&scores.spans))
        }
    };
    Ok(Prepared {
        y,
        instr: Some(instr),
        groups,
    })
}

pub fn choose_lambda(cfg: &Resolved, y: &PhenotypeMatrix, x: &ExogenousMatrix) -> Result<(f64, Option<CvResult>)> {
    if let Some(l) = cfg.lambda {
        return Ok((l, None));
    }
    let lmax = system_lambda_max(y, x)?;
    if lmax == 0.0 {
        return Ok((0.0, None));
    }
    let grid = lambda_grid(lmax, cfg.cv_points);
    let cv = cross_validate_lambda(y, x, &grid, cfg.cv_folds, cfg.seed, &cfg.settings(0.0))?;
    info!("cross-validated λ = {:.6e} (λ_max = {lmax:.6e})", cv.lambda);
    Ok((cv.lambda, Some(cv)))
}

fn write_cv_curve(cv: &CvResult, prov: &Provenance) -> String {
    let mut s = prov.header("#");
    s.push_str("lambda,error\n");
    for p in &cv.curve {
        s.push_str(&format!("{},{}\n", p.lambda, p.error));
    }
    s
}

fn trait_graph(y: &PhenotypeMatrix) -> Result<CausalGraph> {
    let mut g = CausalGraph::new();
    for name in y.names() {
        g.add_node(name, NodeKind::Trait)?;
    }
    Ok(g)
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let cfg = resolve(&args.data, None, None, None)?;
    let prov = cfg.provenance(());
    let data = prepare(&cfg)?;
    let mut graph = trait_graph(&data.y)?;
    let mut rows = Vec::new();
    match &data.instr {
        None => warn!("no polymorphic variants: phenotype edges are not identified, writing a trait-only network"),
        Some(x) => {
            let (lambda, cv) = choose_lambda(&cfg, &data.y, x)?;
            if let Some(cv) = &cv {
                write_out(&cfg.out, "cv_curve.csv", &write_cv_curve(cv, &prov))?;
            }
            let net = estimate_network(&data.y, x, &data.groups, &cfg.settings(lambda), &NetworkOptions { refit: cfg.refit })?;
            if !net.unconverged.is_empty() {
                warn!("ADMM did not converge for equations {:?}", net.unconverged);
            }
            rows = io::edge_rows(&net, cfg.p_threshold);
            for r in &rows {
                graph.add_named_edge(&r.source, &r.target, r.kind, r.coefficient, r.stability)?;
            }
        }
    }
    write_out(&cfg.out, "edges.csv", &io::write_edges(&rows, &prov)?)?;
    write_out(&cfg.out, "network.dot", &io::write_dot(&graph, &prov))?;
    Ok(())
}

pub fn cmd_test(args: &TestArgs) -> Result<()> {
    let cfg = resolve(&args.data, args.resamples, None, None)?;
    let prov = cfg.provenance(args.resamples);
    let data = prepare(&cfg)?;
    let Some(x) = &data.instr else {
        bail!(SemError::InvalidInput("path tests need at least one polymorphic variant".into()));
    };
    let (lambda, _) = choose_lambda(&cfg, &data.y, x)?;
    let settings = cfg.settings(lambda);
    let net = estimate_network(&data.y, x, &data.groups, &settings, &NetworkOptions { refit: cfg.refit })?;
    let freq = match args.resamples {
        Some(_) => Some(stability_selection(&data.y, x, &data.groups, &settings, &cfg.stability())?),
        None => None,
    };
    let rows: Vec<TestRow> = net
        .edges
        .iter()
        .map(|e| TestRow {
            equation: e.target.clone(),
            source: e.source.clone(),
            kind: e.kind,
            statistic: e.statistic,
            dof: e.dof,
            p_value: e.p_value,
            stability_frequency: freq.as_ref().and_then(|f| {
                f.iter()
                    .find(|s| s.kind == e.kind && s.source == e.source_index && s.target == e.target_index)
                    .map(|s| s.frequency)
            }),
        })
        .collect();
    write_out(&cfg.out, "tests.csv", &io::write_tests(&rows, &prov)?)
}

pub fn cmd_stability(args: &StabilityArgs) -> Result<()> {
    let cfg = resolve(&args.data, args.resamples, args.freq_threshold, args.scheme)?;
    let prov = cfg.provenance(());
    let data = prepare(&cfg)?;
    let Some(x) = &data.instr else {
        bail!(SemError::InvalidInput("stability selection needs at least one polymorphic variant".into()));
    };
    let (lambda, _) = choose_lambda(&cfg, &data.y, x)?;
    let result = stability_selection(&data.y, x, &data.groups, &cfg.settings(lambda), &cfg.stability())?;
    write_out(&cfg.out, "stability.csv", &io::write_stability(&result, &prov)?)
}

/// Observed values for every graph node found in the inputs: trait columns,
/// variant profiles, and the first FPC score of each gene.
fn node_data(args: &EffectsArgs) -> Result<Option<NodeData>> {
    let Some(ppath) = &args.phenotypes else {
        if args.genotypes.is_some() {
            warn!("--genotypes without --phenotypes: marginal effects skipped");
        }
        return Ok(None);
    };
    let y = read_traits(ppath, args.irn)?;
    let mut data = NodeData::default();
    for (c, name) in y.names().iter().enumerate() {
        data.columns.insert(name.clone(), y.column(c));
    }
    if let Some(gpath) = &args.genotypes {
        let table = io::read_genotypes(open(gpath)?).with_context(|| format!("in {}", gpath.display()))?;
        if !table.variants.is_empty() {
            if table.n_individuals() != y.n() {
                bail!(SemError::Dimension(format!(
                    "{} individuals in {}, {} in {}",
                    table.n_individuals(),
                    gpath.display(),
                    y.n(),
                    ppath.display()
                )));
            }
            let x = table.profile_matrix()?;
            for (c, name) in x.names().iter().enumerate() {
                data.columns.insert(name.clone(), x.values().column(c).into_owned());
            }
            for region in table.regions()? {
                let basis = functional_pca(&region)?;
                if basis.n_components() > 0 {
                    let score: DVector<f64> = basis.scores.column(0).into_owned();
                    data.columns.insert(region.name.clone(), score);
                }
            }
        }
    }
    Ok(Some(data))
}

pub fn cmd_effects(args: &EffectsArgs) -> Result<()> {
    let key = (&args.edges, &args.phenotypes, &args.genotypes, args.irn, args.break_cycles);
    let prov = provenance(args.seed, &key);
    let rows = io::read_edges(open(&args.edges)?).with_context(|| format!("in {}", args.edges.display()))?;
    let mut graph = io::graph_from_edges(&rows)?;
    if let Some(BreakCycles::WeakerEdge) = args.break_cycles {
        let (g, dropped) = break_cycles_weaker_edge(&graph)?;
        for e in &dropped {
            warn!(
                "dropped {} -> {} to break a cycle",
                graph.nodes()[e.source].name,
                graph.nodes()[e.target].name
            );
        }
        graph = g;
    }
    let data = node_data(args)?;
    let reports = all_effect_reports(&graph, data.as_ref())?;
    write_out(&args.out, "effects.csv", &io::write_effects(&reports, &prov)?)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut spec = SimulationSpec::from_toml(&text).with_context(|| format!("in {}", args.config.display()))?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(l) = args.lambda {
        spec.lambda = Some(l);
    }
    if let Some(r) = args.replicates {
        spec.replicates = r;
    }
    if let Some(m) = args.recovery_mode {
        spec.recovery_mode = match m {
            RecoveryArg::Paper => RecoveryMode::Paper,
            RecoveryArg::Recall => RecoveryMode::Recall,
        };
    }
    spec.validate()?;
    let prov = provenance(spec.seed, &spec);
    let result = sparsesem::simulation::run_experiment(&spec)?;
    write_out(&args.out, "curve.csv", &io::write_curve(&result.rows, &prov)?)?;
    write_out(&args.out, "replicate_edges.csv", &io::write_replicate_edges(&result.records, &prov)?)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Test(a) => cmd_test(a),
        Command::Stability(a) => cmd_stability(a),
        Command::Effects(a) => cmd_effects(a),
    }
}

/// Runs `cli` on a pool of `--threads` workers.
pub fn run_with_threads(cli: &Cli) -> Result<()> {
    match cli.threads {
        Some(0) => bail!(SemError::InvalidInput("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building thread pool")?
            .install(|| run(cli)),
        None => run(cli),
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// 3 for numerical failures, 2 for everything else that reaches `run`.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<SemError>() {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}
