//! Sparse structural equation models for genotype-phenotype networks.
//!
//! The crate estimates a phenotype network together with genetic effects on
//! each phenotype by l1-penalized two-stage least squares, solved one
//! equation at a time with ADMM. Variant-level models use encoded genotypes
//! as instruments; gene-level models replace them with functional principal
//! component scores of each gene's genotype profile. On top of a fitted
//! network the crate provides path-coefficient tests, stability selection,
//! direct/indirect/total effect decomposition and a simulation harness for
//! measuring structure recovery.

pub mod admm;
pub mod effects;
pub mod error;
pub mod fpca;
pub mod fsem;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod model;
pub mod network;
pub mod simulation;

pub use error::{Result, SemError};
pub use nalgebra::{DMatrix, DVector};

pub use admm::{AdmmSettings, AdmmState, SparseSolution};
pub use effects::{CausalGraph, EffectReport};
pub use fpca::{FpcaBasis, Region, ScoreMatrix, VariantRecord};
pub use fsem::{EffectFunction, FsemFit};
pub use model::{EquationView, ExogenousMatrix, PhenotypeMatrix, SemFit};
pub use network::{EdgeEstimate, EdgeKind, NetworkEstimate, SourceGroup};
