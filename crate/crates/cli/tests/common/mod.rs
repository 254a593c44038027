#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparsesem::simulation::{generate_genotypes, generate_phenotypes};
use sparsesem::DMatrix;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparsesem"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn sparsesem")
}

pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "sparsesem {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

/// Data rows of a CSV output (header comments stripped).
pub fn rows(path: impl AsRef<Path>) -> Vec<Vec<String>> {
    read(path)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

pub const GENES: usize = 4;
pub const PER_GENE: usize = 3;

/// Three traits and four 3-variant genes:
/// `G0:v0 → T1`, `T1 → T2`, `G1:v0 → T2`, `G2:v1 → T3`, `T2 → T3`.
pub fn write_dataset(dir: &Path, seed: u64, n: usize) -> (PathBuf, PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mafs: Vec<f64> = (0..GENES * PER_GENE).map(|v| 0.2 + 0.05 * (v % 5) as f64).collect();
    let codes = generate_genotypes(&mafs, n, false, &mut rng);
    let x = DMatrix::from_fn(n, codes.len(), |i, v| codes[v][i] as f64 - 2.0 * mafs[v]);
    let mut gamma = -DMatrix::identity(3, 3);
    gamma[(0, 1)] = 0.7;
    gamma[(1, 2)] = 0.6;
    let mut beta = DMatrix::zeros(codes.len(), 3);
    beta[(0, 0)] = 0.8;
    beta[(PER_GENE, 1)] = 0.7;
    beta[(2 * PER_GENE + 1, 2)] = 0.8;
    let (y, _) = generate_phenotypes(&x, &gamma, &beta, 1.0, &mut rng).unwrap();

    let mut pheno = String::from("id\tT1\tT2\tT3\n");
    for i in 0..n {
        writeln!(pheno, "s{i}\t{}\t{}\t{}", y[(i, 0)], y[(i, 1)], y[(i, 2)]).unwrap();
    }
    let mut geno = String::from("variant_id\tgene\tposition\tallele_freq_Q");
    for i in 0..n {
        write!(geno, "\ts{i}").unwrap();
    }
    geno.push('\n');
    for (v, c) in codes.iter().enumerate() {
        let (g, k) = (v / PER_GENE, v % PER_GENE);
        write!(geno, "G{g}v{k}\tG{g}\t{}\tNA", 1000 + 250 * k).unwrap();
        for code in c {
            write!(geno, "\t{code}").unwrap();
        }
        geno.push('\n');
    }
    let (pp, gp) = (dir.join("pheno.tsv"), dir.join("geno.tsv"));
    std::fs::write(&pp, pheno).unwrap();
    std::fs::write(&gp, geno).unwrap();
    (pp, gp)
}

/// Every regular file under `dir`, sorted, with its bytes.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}
