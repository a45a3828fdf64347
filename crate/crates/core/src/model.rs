//! Terrain graphs, memory configurations and moving strategies.
//!
//! A [`Graph`] is a strongly connected directed graph with positive integer
//! traversal times. Combining it with `M` memory states gives the
//! [`ConfigGraph`]: configurations `(v, m)` and an edge `(v, m) -> (u, m')`
//! for every base edge `v -> u` and every pair of memory states. A
//! [`Strategy`] assigns each such edge a probability; rows sum to one.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use crate::error::{Error, Result};

/// Tolerance for row sums of a strategy built by this crate.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// Default probability threshold used by [`cutoff`].
pub const DEFAULT_CUTOFF: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub tm: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    vertices: Vec<String>,
    edges: Vec<Edge>,
    index: HashMap<String, usize>,
}

impl Graph {
    /// Builds a graph from vertex names and `(from, to, tm)` triples.
    ///
    /// Only structural problems are reported here (unknown or duplicate
    /// names, duplicate edges); traversal times and connectivity are checked
    /// by [`validate_graph`].
    pub fn new<S: AsRef<str>>(vertices: &[S], edges: &[(S, S, i64)]) -> Result<Graph> {
        let mut index = HashMap::with_capacity(vertices.len());
        let mut names = Vec::with_capacity(vertices.len());
        for v in vertices {
            let v = v.as_ref().to_string();
            if index.insert(v.clone(), names.len()).is_some() {
                return Err(Error::DuplicateVertex(v));
            }
            names.push(v);
        }
        let mut out = Vec::with_capacity(edges.len());
        let mut seen = HashMap::new();
        for (from, to, tm) in edges {
            let (from, to) = (from.as_ref(), to.as_ref());
            let f = *index
                .get(from)
                .ok_or_else(|| Error::UnknownVertex(from.to_string()))?;
            let t = *index
                .get(to)
                .ok_or_else(|| Error::UnknownVertex(to.to_string()))?;
            if seen.insert((f, t), ()).is_some() {
                return Err(Error::DuplicateEdge {
                    from: from.to_string(),
                    to: to.to_string(),
                });
            }
            out.push(Edge {
                from: f,
                to: t,
                tm: *tm,
            });
        }
        Ok(Graph {
            vertices: names,
            edges: out,
            index,
        })
    }

    pub fn vertices(&self) -> &[String] {
        &self.vertices
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertex_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn vertex_name(&self, v: usize) -> &str {
        &self.vertices[v]
    }

    pub fn edge_index(&self, from: usize, to: usize) -> Option<usize> {
        self.edges.iter().position(|e| e.from == from && e.to == to)
    }

    fn successors(&self) -> Vec<Vec<usize>> {
        let mut succ = vec![Vec::new(); self.vertices.len()];
        for e in &self.edges {
            succ[e.from].push(e.to);
        }
        succ
    }
}

fn reachable_from(succ: &[Vec<usize>], start: usize) -> Vec<bool> {
    let mut seen = vec![false; succ.len()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(v) = queue.pop_front() {
        for &u in &succ[v] {
            if !seen[u] {
                seen[u] = true;
                queue.push_back(u);
            }
        }
    }
    seen
}

/// Checks traversal times and strong connectivity.
pub fn validate_graph(g: &Graph) -> Result<()> {
    if g.vertices.is_empty() {
        return Err(Error::EmptyGraph);
    }
    if let Some(e) = g.edges.iter().find(|e| e.tm < 1) {
        return Err(Error::NonPositiveTraversalTime {
            from: g.vertices[e.from].clone(),
            to: g.vertices[e.to].clone(),
            tm: e.tm,
        });
    }
    let succ = g.successors();
    let mut pred = vec![Vec::new(); succ.len()];
    for e in &g.edges {
        pred[e.to].push(e.from);
    }
    let forward = reachable_from(&succ, 0);
    if let Some(v) = forward.iter().position(|r| !r) {
        return Err(Error::NotStronglyConnected {
            from: g.vertices[0].clone(),
            to: g.vertices[v].clone(),
        });
    }
    let backward = reachable_from(&pred, 0);
    if let Some(v) = backward.iter().position(|r| !r) {
        return Err(Error::NotStronglyConnected {
            from: g.vertices[v].clone(),
            to: g.vertices[0].clone(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Config {
    pub vertex: usize,
    pub mem: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigEdge {
    /// Source configuration index.
    pub from: usize,
    /// Target configuration index.
    pub to: usize,
    /// Index of the underlying base edge.
    pub base: usize,
    pub tm: f64,
}

/// Product of a graph with a finite set of memory states.
///
/// Configuration `(v, m)` has index `v * memory + m`. Config edges are stored
/// grouped by source configuration, so the outgoing edges of a configuration
/// (its strategy row) form a contiguous range.
#[derive(Clone, Debug)]
pub struct ConfigGraph {
    base: Graph,
    memory: usize,
    edges: Vec<ConfigEdge>,
    row_start: Vec<usize>,
    incoming: Vec<Vec<usize>>,
    lookup: HashMap<(usize, usize), usize>,
}

pub fn build_config_graph(g: &Graph, memory_count: usize) -> Result<ConfigGraph> {
    validate_graph(g)?;
    if memory_count == 0 {
        return Err(Error::ZeroMemory);
    }
    let n = g.vertex_count() * memory_count;
    let mut by_source: Vec<Vec<&Edge>> = vec![Vec::new(); g.vertex_count()];
    for e in &g.edges {
        by_source[e.from].push(e);
    }
    for out in &mut by_source {
        out.sort_by_key(|e| e.to);
    }
    let mut edges = Vec::new();
    let mut row_start = Vec::with_capacity(n + 1);
    for v in 0..g.vertex_count() {
        for m in 0..memory_count {
            row_start.push(edges.len());
            for e in &by_source[v] {
                let base = g.edge_index(e.from, e.to).expect("edge of graph");
                for m2 in 0..memory_count {
                    edges.push(ConfigEdge {
                        from: v * memory_count + m,
                        to: e.to * memory_count + m2,
                        base,
                        tm: e.tm as f64,
                    });
                }
            }
        }
    }
    row_start.push(edges.len());
    let mut incoming = vec![Vec::new(); n];
    let mut lookup = HashMap::with_capacity(edges.len());
    for (i, e) in edges.iter().enumerate() {
        incoming[e.to].push(i);
        lookup.insert((e.from, e.to), i);
    }
    Ok(ConfigGraph {
        base: g.clone(),
        memory: memory_count,
        edges,
        row_start,
        incoming,
        lookup,
    })
}

impl ConfigGraph {
    pub fn base(&self) -> &Graph {
        &self.base
    }

    pub fn memory_count(&self) -> usize {
        self.memory
    }

    pub fn config_count(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn edges(&self) -> &[ConfigEdge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn config(&self, index: usize) -> Config {
        Config {
            vertex: index / self.memory,
            mem: index % self.memory,
        }
    }

    pub fn config_index(&self, vertex: usize, mem: usize) -> usize {
        vertex * self.memory + mem
    }

    pub fn configs(&self) -> impl Iterator<Item = Config> + '_ {
        (0..self.config_count()).map(|i| self.config(i))
    }

    /// Config edge indices leaving configuration `c`.
    pub fn row(&self, c: usize) -> std::ops::Range<usize> {
        self.row_start[c]..self.row_start[c + 1]
    }

    pub fn incoming(&self, c: usize) -> &[usize] {
        &self.incoming[c]
    }

    pub fn edge_between(&self, from: usize, to: usize) -> Option<usize> {
        self.lookup.get(&(from, to)).copied()
    }

    /// Finds a configuration index from a vertex name and memory state.
    pub fn resolve_config(&self, vertex: &str, mem: usize) -> Option<usize> {
        let v = self.base.vertex_index(vertex)?;
        (mem < self.memory).then(|| self.config_index(v, mem))
    }

    pub fn config_label(&self, c: usize) -> String {
        let cf = self.config(c);
        format!("({},{})", self.base.vertex_name(cf.vertex), cf.mem)
    }

    pub fn edge_label(&self, e: usize) -> String {
        let e = &self.edges[e];
        format!("{}->{}", self.config_label(e.from), self.config_label(e.to))
    }
}

/// Unconstrained real coefficients, one per config edge.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients(pub Vec<f64>);

impl Coefficients {
    pub fn zeros(cg: &ConfigGraph) -> Self {
        Coefficients(vec![0.0; cg.edge_count()])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Probabilities on config edges, indexed like [`ConfigGraph::edges`].
#[derive(Clone, Debug, PartialEq)]
pub struct Strategy {
    probs: Vec<f64>,
}

impl Strategy {
    /// Wraps probabilities after checking that each row is a distribution
    /// within `tolerance`.
    pub fn with_tolerance(cg: &ConfigGraph, probs: Vec<f64>, tolerance: f64) -> Result<Self> {
        if probs.len() != cg.edge_count() {
            return Err(Error::InvalidStrategy(format!(
                "expected {} probabilities, got {}",
                cg.edge_count(),
                probs.len()
            )));
        }
        for c in 0..cg.config_count() {
            let row = &probs[cg.row(c)];
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::InvalidStrategy(format!(
                    "probability {p} out of range in row {}",
                    cg.config_label(c)
                )));
            }
            let sum: f64 = row.iter().sum();
            if !row.is_empty() && (sum - 1.0).abs() > tolerance {
                return Err(Error::InvalidStrategy(format!(
                    "row {} sums to {sum}",
                    cg.config_label(c)
                )));
            }
        }
        Ok(Strategy { probs })
    }

    pub fn new(cg: &ConfigGraph, probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(cg, probs, ROW_SUM_TOLERANCE)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, edge: usize) -> f64 {
        self.probs[edge]
    }

    pub fn is_deterministic(&self, cg: &ConfigGraph) -> bool {
        (0..cg.config_count()).all(|c| self.probs[cg.row(c)].iter().all(|&p| p == 0.0 || p == 1.0))
    }
}

/// Row-wise softmax of the coefficients.
pub fn softmax_strategy(cg: &ConfigGraph, c: &Coefficients) -> Strategy {
    assert_eq!(c.0.len(), cg.edge_count(), "one coefficient per config edge");
    let mut probs = vec![0.0; cg.edge_count()];
    for conf in 0..cg.config_count() {
        let range = cg.row(conf);
        let row = &c.0[range.clone()];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (p, &x) in probs[range.clone()].iter_mut().zip(row) {
            *p = (x - max).exp();
            sum += *p;
        }
        for p in &mut probs[range] {
            *p /= sum;
        }
    }
    Strategy { probs }
}

/// Zeroes probabilities below `threshold` and renormalizes each row.
pub fn cutoff(cg: &ConfigGraph, s: &Strategy, threshold: f64) -> Result<Strategy> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::InvalidParameter(format!(
            "cutoff threshold {threshold} outside [0, 1)"
        )));
    }
    let mut probs = s.probs.clone();
    for conf in 0..cg.config_count() {
        let row = &mut probs[cg.row(conf)];
        if row.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        let mut removed = false;
        for p in row.iter_mut() {
            if *p < threshold && *p > 0.0 {
                *p = 0.0;
                removed = true;
            }
            sum += *p;
        }
        if sum == 0.0 {
            return Err(Error::EmptyRow(cg.config_label(conf)));
        }
        // Untouched rows keep their exact bits.
        if removed {
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
    }
    Ok(Strategy { probs })
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.vertex, self.mem)
    }
}
