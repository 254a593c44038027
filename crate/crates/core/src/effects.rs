//! Direct, indirect, total and marginal effects on a fitted causal network.

use std::collections::{HashMap, HashSet};

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Result, SemError};
use crate::linalg;
use crate::network::{EdgeKind, NetworkEstimate};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Trait,
    /// Gene or single variant; never has parents.
    Gene,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub kind: EdgeKind,
    pub weight: f64,
    pub stability: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct CausalGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    index: HashMap<String, usize>,
    out: Vec<Vec<usize>>,
}

impl CausalGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Adds a node or returns the existing one; a kind mismatch is an error.
    pub fn add_node(&mut self, name: &str, kind: NodeKind) -> Result<usize> {
        if let Some(&i) = self.index.get(name) {
            if self.nodes[i].kind != kind {
                return Err(SemError::InvalidInput(format!("node '{name}' used as both trait and gene")));
            }
            return Ok(i);
        }
        let i = self.nodes.len();
        self.nodes.push(Node {
            name: name.to_string(),
            kind,
        });
        self.index.insert(name.to_string(), i);
        self.out.push(Vec::new());
        Ok(i)
    }

    pub fn node_index(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| SemError::Unknown {
            kind: "node",
            name: name.to_string(),
        })
    }

    pub fn add_edge(
        &mut self,
        source: usize,
        target: usize,
        kind: EdgeKind,
        weight: f64,
        stability: Option<f64>,
    ) -> Result<()> {
        let n = self.nodes.len();
        for idx in [source, target] {
            if idx >= n {
                return Err(SemError::IndexOutOfRange { index: idx, size: n });
            }
        }
        let (s, t) = (&self.nodes[source].name, &self.nodes[target].name);
        if source == target {
            return Err(SemError::InvalidInput(format!("self-loop on '{s}'")));
        }
        if self.nodes[target].kind == NodeKind::Gene {
            return Err(SemError::InvalidInput(format!("edge {s}->{t} enters gene node '{t}'")));
        }
        if !weight.is_finite() {
            return Err(SemError::InvalidInput(format!("edge {s}->{t} has weight {weight}")));
        }
        if self.edge(source, target).is_some() {
            return Err(SemError::InvalidInput(format!("duplicate edge {s}->{t}")));
        }
        self.out[source].push(self.edges.len());
        self.edges.push(Edge {
            source,
            target,
            kind,
            weight,
            stability,
        });
        Ok(())
    }

    /// Adds an edge by node names, creating trait/gene nodes as needed.
    pub fn add_named_edge(
        &mut self,
        source: &str,
        target: &str,
        kind: EdgeKind,
        weight: f64,
        stability: Option<f64>,
    ) -> Result<()> {
        let skind = match kind {
            EdgeKind::Gamma => NodeKind::Trait,
            EdgeKind::Beta => NodeKind::Gene,
        };
        let s = self.add_node(source, skind)?;
        let t = self.add_node(target, NodeKind::Trait)?;
        self.add_edge(s, t, kind, weight, stability)
    }

    pub fn edge(&self, source: usize, target: usize) -> Option<&Edge> {
        self.out
            .get(source)?
            .iter()
            .map(|&e| &self.edges[e])
            .find(|e| e.target == target)
    }

    pub fn successors(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.out[node].iter().map(|&e| (self.edges[e].target, self.edges[e].weight))
    }

    /// Graph of the edges of `net` with p-value below `p_threshold`; every
    /// trait becomes a node even when isolated.
    pub fn from_network(net: &NetworkEstimate, p_threshold: f64) -> Result<Self> {
        let mut g = Self::new();
        for t in &net.trait_names {
            g.add_node(t, NodeKind::Trait)?;
        }
        for e in net.significant(p_threshold) {
            g.add_named_edge(&e.source, &e.target, e.kind, e.coefficient, None)?;
        }
        Ok(g)
    }

    fn reachable(&self, start: usize, forward: bool) -> Vec<bool> {
        let mut incoming: Vec<Vec<usize>> = Vec::new();
        if !forward {
            incoming = vec![Vec::new(); self.nodes.len()];
            for e in &self.edges {
                incoming[e.target].push(e.source);
            }
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            let next: Vec<usize> = if forward {
                self.successors(v).map(|(t, _)| t).collect()
            } else {
                incoming[v].clone()
            };
            for w in next {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen
    }

    /// Errors when a directed cycle lies on some walk from `source` to `target`.
    fn check_acyclic_between(&self, source: usize, target: usize) -> Result<Vec<bool>> {
        let fwd = self.reachable(source, true);
        let bwd = self.reachable(target, false);
        let inside: Vec<bool> = fwd.iter().zip(&bwd).map(|(&a, &b)| a && b).collect();
        // Kahn's algorithm restricted to the nodes lying between source and target.
        let mut indeg = vec![0usize; self.nodes.len()];
        for e in &self.edges {
            if inside[e.source] && inside[e.target] {
                indeg[e.target] += 1;
            }
        }
        let mut queue: Vec<usize> = (0..self.nodes.len()).filter(|&v| inside[v] && indeg[v] == 0).collect();
        let mut removed = 0;
        while let Some(v) = queue.pop() {
            removed += 1;
            for (w, _) in self.successors(v) {
                if inside[w] {
                    indeg[w] -= 1;
                    if indeg[w] == 0 {
                        queue.push(w);
                    }
                }
            }
        }
        let total = inside.iter().filter(|&&b| b).count();
        if removed < total {
            let cyc: Vec<&str> = (0..self.nodes.len())
                .filter(|&v| inside[v] && indeg[v] > 0)
                .map(|v| self.nodes[v].name.as_str())
                .collect();
            return Err(SemError::CyclicGraph(format!(
                "{} -> {} through {}",
                self.nodes[source].name,
                self.nodes[target].name,
                cyc.join(", ")
            )));
        }
        Ok(inside)
    }
}

/// Directed path with the product of its edge weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub nodes: Vec<usize>,
    pub product: f64,
}

impl Path {
    pub fn n_edges(&self) -> usize {
        self.nodes.len() - 1
    }
}

/// All simple directed paths from `source` to `target` with at most
/// `max_len` edges (default: node count, i.e. unbounded).
pub fn enumerate_paths(g: &CausalGraph, source: usize, target: usize, max_len: Option<usize>) -> Result<Vec<Path>> {
    let n = g.n_nodes();
    for idx in [source, target] {
        if idx >= n {
            return Err(SemError::IndexOutOfRange { index: idx, size: n });
        }
    }
    if source == target {
        return Err(SemError::InvalidInput(format!(
            "source and target are both '{}'",
            g.nodes[source].name
        )));
    }
    let inside = g.check_acyclic_between(source, target)?;
    let max_len = max_len.unwrap_or(n);
    let mut out = Vec::new();
    if !inside[source] {
        return Ok(out);
    }
    let mut stack = vec![source];
    let mut on_path = vec![false; n];
    on_path[source] = true;
    walk(g, target, max_len, &inside, &mut stack, &mut on_path, 1.0, &mut out);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    g: &CausalGraph,
    target: usize,
    max_len: usize,
    inside: &[bool],
    stack: &mut Vec<usize>,
    on_path: &mut [bool],
    product: f64,
    out: &mut Vec<Path>,
) {
    let v = *stack.last().expect("non-empty path");
    if v == target {
        out.push(Path {
            nodes: stack.clone(),
            product,
        });
        return;
    }
    if stack.len() > max_len {
        return;
    }
    for (w, weight) in g.successors(v) {
        if inside[w] && !on_path[w] {
            stack.push(w);
            on_path[w] = true;
            walk(g, target, max_len, inside, stack, on_path, product * weight, out);
            on_path[w] = false;
            stack.pop();
        }
    }
}

fn path_sum<'a>(products: impl Iterator<Item = &'a f64>) -> f64 {
    products.fold(0.0, |acc, p| acc + p)
}

pub fn total_effect_paths(g: &CausalGraph, source: usize, target: usize) -> Result<f64> {
    Ok(path_sum(enumerate_paths(g, source, target, None)?.iter().map(|p| &p.product)))
}

pub fn direct_effect(g: &CausalGraph, source: usize, target: usize) -> f64 {
    g.edge(source, target).map_or(0.0, |e| e.weight)
}

/// Sum over mediated paths; with `via`, only paths passing through every
/// node of `via`.
pub fn indirect_effect(g: &CausalGraph, source: usize, target: usize, via: Option<&[usize]>) -> Result<f64> {
    let paths = enumerate_paths(g, source, target, None)?;
    Ok(path_sum(
        paths
            .iter()
            .filter(|p| p.n_edges() > 1)
            .filter(|p| via.is_none_or(|v| v.iter().all(|m| p.nodes[1..p.nodes.len() - 1].contains(m))))
            .map(|p| &p.product),
    ))
}

/// Regression coefficient with its linear-model standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionEffect {
    pub estimate: f64,
    pub std_error: f64,
}

/// Coefficient of `source` in the least-squares regression (with intercept)
/// of `target` on `source` and `parents`.
pub fn total_effect_regression(
    target: &DVector<f64>,
    source: &DVector<f64>,
    parents: &[DVector<f64>],
) -> Result<RegressionEffect> {
    let n = target.len();
    let p = 1 + parents.len();
    if source.len() != n || parents.iter().any(|c| c.len() != n) {
        return Err(SemError::Dimension("regression columns differ in length".into()));
    }
    if n <= p + 1 {
        return Err(SemError::InvalidInput(format!("{n} observations for {p} regressors and an intercept")));
    }
    let mut design = DMatrix::zeros(n, p);
    design.set_column(0, source);
    for (k, c) in parents.iter().enumerate() {
        design.set_column(k + 1, c);
    }
    for mut col in design.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let yc = target.add_scalar(-target.mean());
    let xtx = design.tr_mul(&design);
    let (inv, ridged) = linalg::inverse_spd_guarded(&xtx)?;
    if ridged {
        warn!("collinear regressors in effect regression; ridge-guarded solve");
    }
    let coef = &inv * design.tr_mul(&yc);
    let resid = &yc - &design * &coef;
    let sigma2 = resid.norm_squared() / (n - p - 1) as f64;
    Ok(RegressionEffect {
        estimate: coef[0],
        std_error: (sigma2 * inv[(0, 0)]).max(0.0).sqrt(),
    })
}

/// Simple-regression slope of `target` on `source`.
pub fn marginal_effect(target: &DVector<f64>, source: &DVector<f64>) -> Result<RegressionEffect> {
    total_effect_regression(target, source, &[])
}

/// Coefficient of X in the regression of Y on X and a scalar Z, from the
/// simple-regression slopes: `(β_YX − β_YZ β_ZX) / (1 − β_XZ β_ZX)`, where
/// `β_AB` is the slope of A on B.
pub fn adjusted_total_effect(beta_yx: f64, beta_yz: f64, beta_zx: f64, beta_xz: f64) -> Result<f64> {
    let r2 = beta_xz * beta_zx;
    if !(r2 < 1.0) || !r2.is_finite() {
        return Err(SemError::Singular(format!(
            "X and Z perfectly correlated (β_XZ·β_ZX = {r2}); adjustment undefined"
        )));
    }
    Ok((beta_yx - beta_yz * beta_zx) / (1.0 - r2))
}

/// Removes the weaker edge of every two-node cycle, comparing stability
/// frequency, then absolute weight. Returns the pruned graph and the
/// removed edges.
pub fn break_cycles_weaker_edge(g: &CausalGraph) -> Result<(CausalGraph, Vec<Edge>)> {
    let strength = |e: &Edge| (e.stability.unwrap_or(f64::NEG_INFINITY), e.weight.abs());
    let mut drop: HashSet<(usize, usize)> = HashSet::new();
    for e in &g.edges {
        if let Some(back) = g.edge(e.target, e.source) {
            if e.source > e.target {
                continue;
            }
            let (a, b) = (strength(e), strength(back));
            // Ties drop the edge leaving the later node.
            let weaker = if a < b || (a == b && e.source > back.source) {
                (e.source, e.target)
            } else {
                (back.source, back.target)
            };
            drop.insert(weaker);
        }
    }
    let mut out = CausalGraph::new();
    for node in &g.nodes {
        out.add_node(&node.name, node.kind)?;
    }
    let mut removed = Vec::new();
    for e in &g.edges {
        if drop.contains(&(e.source, e.target)) {
            removed.push(e.clone());
        } else {
            out.add_edge(e.source, e.target, e.kind, e.weight, e.stability)?;
        }
    }
    Ok((out, removed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectReport {
    pub source: String,
    pub target: String,
    pub direct: f64,
    pub indirect: f64,
    pub total: f64,
    pub marginal: Option<f64>,
    pub paths: Vec<(Vec<String>, f64)>,
}

/// Observed node values used for marginal effects.
#[derive(Clone, Debug, Default)]
pub struct NodeData {
    pub columns: HashMap<String, DVector<f64>>,
}

pub fn effect_report(g: &CausalGraph, source: usize, target: usize, data: Option<&NodeData>) -> Result<EffectReport> {
    let paths = enumerate_paths(g, source, target, None)?;
    let direct = direct_effect(g, source, target);
    let indirect = path_sum(paths.iter().filter(|p| p.n_edges() > 1).map(|p| &p.product));
    let total = path_sum(paths.iter().map(|p| &p.product));
    let (s, t) = (&g.nodes[source].name, &g.nodes[target].name);
    let marginal = match data {
        Some(d) => match (d.columns.get(s), d.columns.get(t)) {
            (Some(x), Some(y)) => Some(marginal_effect(y, x)?.estimate),
            _ => None,
        },
        None => None,
    };
    Ok(EffectReport {
        source: s.clone(),
        target: t.clone(),
        direct,
        indirect,
        total,
        marginal,
        paths: paths
            .iter()
            .map(|p| (p.nodes.iter().map(|&v| g.nodes[v].name.clone()).collect(), p.product))
            .collect(),
    })
}

/// One report for every ordered pair joined by at least one directed path.
pub fn all_effect_reports(g: &CausalGraph, data: Option<&NodeData>) -> Result<Vec<EffectReport>> {
    let n = g.n_nodes();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t)))
        .filter(|&(_, t)| g.nodes[t].kind == NodeKind::Trait)
        .collect();
    let reports: Vec<Result<Option<EffectReport>>> = pairs
        .par_iter()
        .map(|&(s, t)| {
            if !g.reachable(s, true)[t] {
                return Ok(None);
            }
            effect_report(g, s, t, data).map(Some)
        })
        .collect();
    let mut out = Vec::new();
    for r in reports {
        if let Some(rep) = r? {
            out.push(rep);
        }
    }
    Ok(out)
}
