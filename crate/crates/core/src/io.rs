//! Text formats: phenotype and genotype TSV input, edge lists, DOT graphs
//! and result tables.

use std::collections::HashMap;
use std::io::Read;

use log::warn;
use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::effects::{CausalGraph, EffectReport, NodeKind};
use crate::error::{Result, SemError};
use crate::fpca::{genotype_profile, Region, VariantRecord};
use crate::inference::StabilityResult;
use crate::model::{ExogenousMatrix, PhenotypeMatrix};
use crate::network::{EdgeKind, NetworkEstimate};
use crate::simulation::{CurveRow, ReplicateRecord};

/// Values recorded in the comment header of every output file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn header(&self, prefix: &str) -> String {
        format!(
            "{prefix} {} {}\n{prefix} seed: {}\n{prefix} config_sha256: {}\n",
            self.tool, self.version, self.seed, self.config_hash
        )
    }
}

fn reader<R: Read>(input: R, delimiter: u8) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input)
}

fn csv_error(e: csv::Error) -> SemError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    SemError::Parse {
        line,
        message: e.to_string(),
    }
}

fn line_of(record: &csv::StringRecord) -> usize {
    record.position().map_or(0, |p| p.line() as usize)
}

fn parse_f64(field: &str, line: usize, column: &str) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| SemError::Parse {
        line,
        message: format!("column '{column}': '{field}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(SemError::Parse {
            line,
            message: format!("column '{column}': non-finite value '{field}'"),
        });
    }
    Ok(v)
}

/// Phenotype table with optional individual ids.
#[derive(Clone, Debug)]
pub struct PhenotypeTable {
    pub ids: Option<Vec<String>>,
    pub traits: PhenotypeMatrix,
}

const ID_COLUMNS: [&str; 4] = ["id", "iid", "sample", "individual"];

/// Reads a tab-separated phenotype table: header of trait names (optionally
/// led by an id column), one row per individual. Missing values are rejected.
pub fn read_phenotypes<R: Read>(input: R, irn: bool) -> Result<PhenotypeTable> {
    let mut rdr = reader(input, b'\t');
    let header: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(SemError::Parse {
            line: 1,
            message: "empty header".into(),
        });
    }
    let has_id = ID_COLUMNS.contains(&header[0].to_ascii_lowercase().as_str());
    let names: Vec<String> = header[has_id as usize..].to_vec();
    let mut ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = line_of(&rec);
        if rec.len() != header.len() {
            return Err(SemError::Parse {
                line,
                message: format!("{} fields, header has {}", rec.len(), header.len()),
            });
        }
        if has_id {
            ids.push(rec[0].to_string());
        }
        let mut row = Vec::with_capacity(names.len());
        for (c, name) in names.iter().enumerate() {
            let field = &rec[c + has_id as usize];
            if field.is_empty() || field.eq_ignore_ascii_case("na") || field.eq_ignore_ascii_case("nan") {
                return Err(SemError::Parse {
                    line,
                    message: format!("missing value for trait '{name}'"),
                });
            }
            row.push(parse_f64(field, line, name)?);
        }
        rows.push(row);
    }
    let mut values = DMatrix::from_fn(rows.len(), names.len(), |r, c| rows[r][c]);
    if irn {
        for mut col in values.column_iter_mut() {
            let t = inverse_rank_normal(col.as_slice());
            col.copy_from_slice(&t);
        }
    }
    Ok(PhenotypeTable {
        ids: has_id.then_some(ids),
        traits: PhenotypeMatrix::new(values, names)?,
    })
}

/// Rank-based inverse normal transform `Φ⁻¹((r − 0.5)/n)` with average ranks for ties.
pub fn inverse_rank_normal(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    ranks.iter().map(|&r| normal.inverse_cdf((r - 0.5) / n as f64)).collect()
}

/// Variants read from a genotype table, with their gene labels.
#[derive(Clone, Debug)]
pub struct GenotypeTable {
    pub genes: Vec<String>,
    pub variants: Vec<VariantRecord>,
    /// Ids of monomorphic variants that were dropped.
    pub dropped: Vec<String>,
}

impl GenotypeTable {
    pub fn n_individuals(&self) -> usize {
        self.variants.first().map_or(0, |v| v.genotypes.len())
    }

    /// One region per gene in order of first appearance; variants sorted by position.
    pub fn regions(&self) -> Result<Vec<Region>> {
        let mut order: Vec<&str> = Vec::new();
        let mut by_gene: HashMap<&str, Vec<VariantRecord>> = HashMap::new();
        for (g, v) in self.genes.iter().zip(&self.variants) {
            by_gene
                .entry(g.as_str())
                .or_insert_with(|| {
                    order.push(g.as_str());
                    Vec::new()
                })
                .push(v.clone());
        }
        order
            .into_iter()
            .map(|g| {
                let mut vars = by_gene.remove(g).unwrap_or_default();
                vars.sort_by_key(|v| v.position);
                Region::from_variants(g, vars)
            })
            .collect()
    }

    /// Genotype-profile matrix with one column per variant.
    pub fn profile_matrix(&self) -> Result<ExogenousMatrix> {
        let n = self.n_individuals();
        let mut x = DMatrix::zeros(n, self.variants.len());
        for (c, v) in self.variants.iter().enumerate() {
            x.set_column(c, &genotype_profile(v)?);
        }
        ExogenousMatrix::new(x, self.variants.iter().map(|v| v.id.clone()).collect())
    }
}

const GENOTYPE_COLUMNS: [&str; 4] = ["variant_id", "gene", "position", "allele_freq_Q"];

/// Reads the genotype table: `variant_id, gene, position, allele_freq_Q`
/// (`NA` to estimate) followed by one code in {0,1,2} per individual.
/// Monomorphic variants are dropped with a warning.
pub fn read_genotypes<R: Read>(input: R) -> Result<GenotypeTable> {
    let mut rdr = reader(input, b'\t');
    let header = rdr.headers().map_err(csv_error)?.clone();
    for (k, expect) in GENOTYPE_COLUMNS.iter().enumerate() {
        if header.get(k).is_none_or(|h| !h.eq_ignore_ascii_case(expect)) {
            return Err(SemError::Parse {
                line: 1,
                message: format!("column {} must be '{expect}'", k + 1),
            });
        }
    }
    let n = header.len() - GENOTYPE_COLUMNS.len();
    let mut table = GenotypeTable {
        genes: Vec::new(),
        variants: Vec::new(),
        dropped: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = line_of(&rec);
        if rec.len() != header.len() {
            return Err(SemError::Parse {
                line,
                message: format!("{} fields, header has {}", rec.len(), header.len()),
            });
        }
        let position: u64 = rec[2].parse().map_err(|_| SemError::Parse {
            line,
            message: format!("column 'position': '{}' is not a base-pair coordinate", &rec[2]),
        })?;
        let freq = if rec[3].eq_ignore_ascii_case("na") {
            None
        } else {
            Some(parse_f64(&rec[3], line, "allele_freq_Q")?)
        };
        let mut codes = Vec::with_capacity(n);
        for (k, field) in rec.iter().skip(GENOTYPE_COLUMNS.len()).enumerate() {
            let code = match field {
                "0" => 0,
                "1" => 1,
                "2" => 2,
                other => {
                    return Err(SemError::Parse {
                        line,
                        message: format!("column '{}': genotype code '{other}' not in {{0,1,2}}", &header[k + 4]),
                    })
                }
            };
            codes.push(code);
        }
        let with_parse_line = |e: SemError| SemError::Parse {
            line,
            message: e.to_string(),
        };
        let probe = VariantRecord::new(&rec[0], position, Some(0.5), codes.clone()).map_err(with_parse_line)?;
        if !probe.is_polymorphic() {
            warn!("variant {} is monomorphic; dropped", &rec[0]);
            table.dropped.push(rec[0].to_string());
            continue;
        }
        let variant = VariantRecord::new(&rec[0], position, freq, codes).map_err(with_parse_line)?;
        table.genes.push(rec[1].to_string());
        table.variants.push(variant);
    }
    Ok(table)
}

/// Edge-list row.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRow {
    pub source: String,
    pub target: String,
    pub kind: EdgeKind,
    pub coefficient: f64,
    pub p_value: f64,
    pub stability: Option<f64>,
}

const EDGE_HEADER: [&str; 6] = ["source", "target", "kind", "coefficient", "p_value", "stability"];

pub fn write_edges(rows: &[EdgeRow], prov: &Provenance) -> Result<String> {
    let mut w = csv_writer();
    w.write_record(EDGE_HEADER).map_err(csv_io)?;
    for r in rows {
        w.write_record([
            r.source.clone(),
            r.target.clone(),
            r.kind.as_str().to_string(),
            r.coefficient.to_string(),
            r.p_value.to_string(),
            r.stability.map_or(String::new(), |s| s.to_string()),
        ])
        .map_err(csv_io)?;
    }
    finish(w, prov, "#")
}

/// Reads an edge list; the `stability` column is optional.
pub fn read_edges<R: Read>(input: R) -> Result<Vec<EdgeRow>> {
    let mut rdr = reader(input, b',');
    let header = rdr.headers().map_err(csv_error)?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let mut idx = [0usize; 5];
    for (k, name) in EDGE_HEADER[..5].iter().enumerate() {
        idx[k] = col(name).ok_or_else(|| SemError::Parse {
            line: 1,
            message: format!("missing column '{name}'"),
        })?;
    }
    let stab = col("stability");
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = line_of(&rec);
        let field = |k: usize| rec.get(k).unwrap_or("");
        let kind = EdgeKind::parse(field(idx[2])).map_err(|e| SemError::Parse {
            line,
            message: e.to_string(),
        })?;
        let stability = match stab.map(field) {
            None | Some("") => None,
            Some(s) => Some(parse_f64(s, line, "stability")?),
        };
        out.push(EdgeRow {
            source: field(idx[0]).to_string(),
            target: field(idx[1]).to_string(),
            kind,
            coefficient: parse_f64(field(idx[3]), line, "coefficient")?,
            p_value: parse_f64(field(idx[4]), line, "p_value")?,
            stability,
        });
    }
    Ok(out)
}

pub fn edge_rows(net: &NetworkEstimate, p_threshold: f64) -> Vec<EdgeRow> {
    net.significant(p_threshold)
        .map(|e| EdgeRow {
            source: e.source.clone(),
            target: e.target.clone(),
            kind: e.kind,
            coefficient: e.coefficient,
            p_value: e.p_value,
            stability: None,
        })
        .collect()
}

pub fn graph_from_edges(rows: &[EdgeRow]) -> Result<CausalGraph> {
    let mut g = CausalGraph::new();
    for r in rows {
        g.add_named_edge(&r.source, &r.target, r.kind, r.coefficient, r.stability)?;
    }
    Ok(g)
}

fn dot_id(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// DOT graph: traits as ellipses, genes as blue boxes, phenotype edges black,
/// genetic edges blue.
pub fn write_dot(g: &CausalGraph, prov: &Provenance) -> String {
    let mut s = prov.header("//");
    s.push_str("digraph network {\n");
    for node in g.nodes() {
        let style = match node.kind {
            NodeKind::Trait => "shape=ellipse",
            NodeKind::Gene => "shape=box, color=blue, fontcolor=blue",
        };
        s.push_str(&format!("  {} [{style}];\n", dot_id(&node.name)));
    }
    for e in g.edges() {
        let color = match e.kind {
            EdgeKind::Gamma => "black",
            EdgeKind::Beta => "blue",
        };
        s.push_str(&format!(
            "  {} -> {} [color={color}, label=\"{:.4}\"];\n",
            dot_id(&g.nodes()[e.source].name),
            dot_id(&g.nodes()[e.target].name),
            e.weight
        ));
    }
    s.push_str("}\n");
    s
}

pub fn write_effects(reports: &[EffectReport], prov: &Provenance) -> Result<String> {
    let mut w = csv_writer();
    w.write_record(["source", "target", "direct", "indirect", "total", "marginal"])
        .map_err(csv_io)?;
    for r in reports {
        w.write_record([
            r.source.clone(),
            r.target.clone(),
            r.direct.to_string(),
            r.indirect.to_string(),
            r.total.to_string(),
            r.marginal.map_or("NA".to_string(), |m| m.to_string()),
        ])
        .map_err(csv_io)?;
    }
    finish(w, prov, "#")
}

/// Path-test row of the tests table.
#[derive(Clone, Debug, PartialEq)]
pub struct TestRow {
    pub equation: String,
    pub source: String,
    pub kind: EdgeKind,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub stability_frequency: Option<f64>,
}

/// Tests table with Bonferroni-adjusted p-values over all rows.
pub fn write_tests(rows: &[TestRow], prov: &Provenance) -> Result<String> {
    let mut w = csv_writer();
    w.write_record([
        "equation",
        "source",
        "kind",
        "statistic",
        "dof",
        "p_value",
        "p_bonferroni",
        "stability_frequency",
    ])
    .map_err(csv_io)?;
    let m = rows.len() as f64;
    for r in rows {
        w.write_record([
            r.equation.clone(),
            r.source.clone(),
            r.kind.as_str().to_string(),
            r.statistic.to_string(),
            r.dof.to_string(),
            r.p_value.to_string(),
            (r.p_value * m).min(1.0).to_string(),
            r.stability_frequency.map_or("NA".to_string(), |f| f.to_string()),
        ])
        .map_err(csv_io)?;
    }
    finish(w, prov, "#")
}

pub fn write_stability(rows: &[StabilityResult], prov: &Provenance) -> Result<String> {
    let mut w = csv_writer();
    w.write_record(["source", "target", "kind", "selection_count", "resamples", "frequency", "kept"])
        .map_err(csv_io)?;
    for r in rows {
        w.write_record([
            r.source_name.clone(),
            r.target_name.clone(),
            r.kind.as_str().to_string(),
            r.selection_count.to_string(),
            r.resamples.to_string(),
            r.frequency.to_string(),
            r.kept.to_string(),
        ])
        .map_err(csv_io)?;
    }
    finish(w, prov, "#")
}

fn opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| x.to_string())
}

pub fn write_curve(rows: &[CurveRow], prov: &Provenance) -> Result<String> {
    let mut w = csv_writer();
    w.write_record([
        "n",
        "method",
        "variant_class",
        "PD",
        "FDR",
        "recall",
        "PD_pheno",
        "PD_geno",
        "detected",
        "true_detected",
        "true_edges",
        "lambda",
        "replicates",
        "seed",
    ])
    .map_err(csv_io)?;
    for r in rows {
        let rec = &r.recovery;
        w.write_record([
            r.n.to_string(),
            r.method.as_str().to_string(),
            r.variant_class.clone(),
            opt(rec.pd),
            opt(rec.fdr),
            opt(rec.recall),
            opt(rec.pd_pheno),
            opt(rec.pd_geno),
            rec.all.detected.to_string(),
            rec.all.true_detected.to_string(),
            rec.all.truth.to_string(),
            r.lambda.to_string(),
            r.replicates.to_string(),
            r.seed.to_string(),
        ])
        .map_err(csv_io)?;
    }
    finish(w, prov, "#")
}

/// Per-replicate true and detected edges, one row per edge.
pub fn write_replicate_edges(records: &[ReplicateRecord], prov: &Provenance) -> Result<String> {
    let mut w = csv_writer();
    w.write_record(["n", "method", "variant_class", "replicate", "set", "kind", "source", "target"])
        .map_err(csv_io)?;
    for r in records {
        for (set, edges) in [("truth", &r.truth), ("detected", &r.detected)] {
            for (kind, s, t) in edges {
                w.write_record([
                    r.n.to_string(),
                    r.method.as_str().to_string(),
                    r.variant_class.clone(),
                    r.replicate.to_string(),
                    set.to_string(),
                    kind.as_str().to_string(),
                    s.to_string(),
                    t.to_string(),
                ])
                .map_err(csv_io)?;
            }
        }
    }
    finish(w, prov, "#")
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().from_writer(Vec::new())
}

fn csv_io(e: csv::Error) -> SemError {
    SemError::InvalidInput(format!("csv: {e}"))
}

fn finish(w: csv::Writer<Vec<u8>>, prov: &Provenance, prefix: &str) -> Result<String> {
    let body = w.into_inner().map_err(|e| SemError::InvalidInput(format!("csv: {e}")))?;
    let body = String::from_utf8(body).map_err(|e| SemError::InvalidInput(e.to_string()))?;
    Ok(prov.header(prefix) + &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance {
            tool: "sparsesem".into(),
            version: "0.0.0".into(),
            seed: 7,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn phenotypes_with_ids_and_comments() {
        let text = "# note\nid\ta\tb\ni1\t1.5\t2\ni2\t-1\t3\ni3\t0\t4\n";
        let t = read_phenotypes(text.as_bytes(), false).unwrap();
        assert_eq!(t.ids.unwrap(), vec!["i1", "i2", "i3"]);
        assert_eq!(t.traits.names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(t.traits.values()[(1, 0)], -1.0);
    }

    #[test]
    fn missing_phenotype_reports_line() {
        let text = "a\tb\n1\t2\n3\tNA\n4\t5\n";
        match read_phenotypes(text.as_bytes(), false) {
            Err(SemError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn irn_ranks_with_ties() {
        let t = inverse_rank_normal(&[3.0, 1.0, 2.0, 2.0]);
        assert!(t[1] < t[2] && t[2] == t[3] && t[3] < t[0]);
        assert!((t.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn genotypes_drop_monomorphic() {
        let text = "variant_id\tgene\tposition\tallele_freq_Q\ti1\ti2\ti3\n\
                    v1\tG1\t100\tNA\t0\t1\t2\n\
                    v2\tG1\t200\t0.3\t1\t1\t0\n\
                    v3\tG2\t50\tNA\t0\t0\t0\n";
        let t = read_genotypes(text.as_bytes()).unwrap();
        assert_eq!(t.variants.len(), 2);
        assert_eq!(t.dropped, vec!["v3"]);
        let regions = t.regions().unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].variants.len(), 2);
    }

    #[test]
    fn bad_genotype_code_reports_line() {
        let text = "variant_id\tgene\tposition\tallele_freq_Q\ti1\ti2\nv1\tG\t1\tNA\t0\t3\n";
        assert!(matches!(read_genotypes(text.as_bytes()), Err(SemError::Parse { line: 2, .. })));
    }

    #[test]
    fn edges_round_trip() {
        let rows = vec![
            EdgeRow {
                source: "G1".into(),
                target: "t1".into(),
                kind: EdgeKind::Beta,
                coefficient: 0.1 + 0.2,
                p_value: 1.234e-9,
                stability: Some(0.93),
            },
            EdgeRow {
                source: "t1".into(),
                target: "t2".into(),
                kind: EdgeKind::Gamma,
                coefficient: -0.605,
                p_value: 0.01,
                stability: None,
            },
        ];
        let text = write_edges(&rows, &prov()).unwrap();
        assert!(text.starts_with("# sparsesem 0.0.0\n# seed: 7\n"));
        assert_eq!(read_edges(text.as_bytes()).unwrap(), rows);
    }

    #[test]
    fn dot_styles_nodes() {
        let mut g = CausalGraph::new();
        g.add_named_edge("G", "a", EdgeKind::Beta, 0.5, None).unwrap();
        g.add_named_edge("a", "b", EdgeKind::Gamma, 0.5, None).unwrap();
        let dot = write_dot(&g, &prov());
        assert!(dot.contains("\"G\" [shape=box, color=blue"));
        assert!(dot.contains("\"a\" -> \"b\" [color=black"));
        assert!(dot.contains("\"G\" -> \"a\" [color=blue"));
    }
}
