//! Analysis of the Markov chain a strategy induces on configurations:
//! bottom strongly connected components, expected hitting times and their
//! second moments, and long-run frequencies.

use crate::error::Result;
use crate::linalg::{solve_linear, Matrix};
use crate::model::{ConfigGraph, Strategy};

/// A bottom strongly connected component of the induced chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bscc {
    /// Member configuration indices, ascending.
    pub members: Vec<usize>,
    /// Positive-probability config edges between members, ascending.
    pub active_edges: Vec<usize>,
    mask: Vec<bool>,
}

impl Bscc {
    pub fn contains(&self, config: usize) -> bool {
        self.mask[config]
    }

    pub fn is_active(&self, cg: &ConfigGraph, s: &Strategy, edge: usize) -> bool {
        let e = &cg.edges()[edge];
        s.prob(edge) > 0.0 && self.mask[e.from] && self.mask[e.to]
    }

    /// Local position of every member, `None` for non-members.
    fn local_index(&self) -> Vec<Option<usize>> {
        let mut idx = vec![None; self.mask.len()];
        for (i, &m) in self.members.iter().enumerate() {
            idx[m] = Some(i);
        }
        idx
    }

    /// The component covering every configuration with every edge active.
    pub fn whole(cg: &ConfigGraph) -> Self {
        Bscc {
            members: (0..cg.config_count()).collect(),
            active_edges: (0..cg.edge_count()).collect(),
            mask: vec![true; cg.config_count()],
        }
    }
}

/// Strongly connected components of the positive-probability subgraph
/// (iterative Tarjan), each as an ascending list of configurations.
fn positive_sccs(cg: &ConfigGraph, s: &Strategy) -> Vec<Vec<usize>> {
    let n = cg.config_count();
    let succ: Vec<Vec<usize>> = (0..n)
        .map(|c| {
            cg.row(c)
                .filter(|&e| s.prob(e) > 0.0)
                .map(|e| cg.edges()[e].to)
                .collect()
        })
        .collect();

    const UNVISITED: usize = usize::MAX;
    let mut index = vec![UNVISITED; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut next = 0;
    let mut out = Vec::new();
    // (vertex, position in its successor list)
    let mut call: Vec<(usize, usize)> = Vec::new();

    for root in 0..n {
        if index[root] != UNVISITED {
            continue;
        }
        call.push((root, 0));
        index[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(top) = call.last_mut() {
            let v = top.0;
            if top.1 < succ[v].len() {
                let w = succ[v][top.1];
                top.1 += 1;
                if index[w] == UNVISITED {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(parent, _)) = call.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack");
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    out.push(comp);
                }
            }
        }
    }
    out
}

/// All BSCCs of the chain induced by `s`, ordered by smallest member.
pub fn bsccs(cg: &ConfigGraph, s: &Strategy) -> Vec<Bscc> {
    let n = cg.config_count();
    let mut result: Vec<Bscc> = positive_sccs(cg, s)
        .into_iter()
        .filter_map(|members| {
            let mut mask = vec![false; n];
            for &m in &members {
                mask[m] = true;
            }
            let mut active = Vec::new();
            for &m in &members {
                for e in cg.row(m) {
                    if s.prob(e) > 0.0 {
                        if !mask[cg.edges()[e].to] {
                            return None;
                        }
                        active.push(e);
                    }
                }
            }
            Some(Bscc {
                members,
                active_edges: active,
                mask,
            })
        })
        .collect();
    result.sort_by_key(|b| b.members[0]);
    result
}

/// Expected hitting times and second moments; `None` outside the BSCC and
/// `f64::INFINITY` when the BSCC misses the target set.
#[derive(Clone, Debug, PartialEq)]
pub struct HittingProfile {
    pub times: Vec<Option<f64>>,
    pub squared_times: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyProfile {
    /// Stationary visit frequency per configuration (zero outside the BSCC).
    pub config_freq: Vec<f64>,
    /// Time-weighted frequency per config edge (zero outside active edges).
    pub edge_freq: Vec<f64>,
}

/// Builds and solves `x_v = Σ σ(v,w) (c(v,w) + x_w)` for non-target members,
/// `x_v = 0` on targets. Returns values indexed by configuration.
fn solve_reach_system(
    cg: &ConfigGraph,
    b: &Bscc,
    s: &Strategy,
    targets: &[bool],
    step_cost: impl Fn(usize) -> f64,
) -> Result<Vec<Option<f64>>> {
    let n = cg.config_count();
    let mut out = vec![None; n];
    if !b.members.iter().any(|&m| targets[m]) {
        for &m in &b.members {
            out[m] = Some(f64::INFINITY);
        }
        return Ok(out);
    }
    let unknowns: Vec<usize> = b.members.iter().copied().filter(|&m| !targets[m]).collect();
    let mut local = vec![usize::MAX; n];
    for (i, &m) in unknowns.iter().enumerate() {
        local[m] = i;
    }
    let k = unknowns.len();
    let mut a = Matrix::identity(k);
    let mut rhs = vec![0.0; k];
    for (i, &v) in unknowns.iter().enumerate() {
        for e in cg.row(v) {
            let p = s.prob(e);
            if p == 0.0 {
                continue;
            }
            rhs[i] += p * step_cost(e);
            let w = cg.edges()[e].to;
            if !targets[w] {
                a[(i, local[w])] -= p;
            }
        }
    }
    let x = if k > 0 { solve_linear(&a, &rhs)? } else { Vec::new() };
    for &m in &b.members {
        out[m] = Some(if targets[m] { 0.0 } else { x[local[m]] });
    }
    Ok(out)
}

pub fn hitting_times(
    cg: &ConfigGraph,
    b: &Bscc,
    s: &Strategy,
    targets: &[bool],
) -> Result<Vec<Option<f64>>> {
    solve_reach_system(cg, b, s, targets, |e| cg.edges()[e].tm)
}

pub fn squared_hitting_times(
    cg: &ConfigGraph,
    b: &Bscc,
    s: &Strategy,
    targets: &[bool],
    times: &[Option<f64>],
) -> Result<Vec<Option<f64>>> {
    solve_reach_system(cg, b, s, targets, |e| {
        let edge = &cg.edges()[e];
        let t = times[edge.to].expect("hitting time inside the BSCC");
        edge.tm * (edge.tm + 2.0 * t)
    })
}

pub fn hitting_profile(
    cg: &ConfigGraph,
    b: &Bscc,
    s: &Strategy,
    targets: &[bool],
) -> Result<HittingProfile> {
    let times = hitting_times(cg, b, s, targets)?;
    let squared_times = squared_hitting_times(cg, b, s, targets, &times)?;
    Ok(HittingProfile {
        times,
        squared_times,
    })
}

pub fn frequencies(cg: &ConfigGraph, b: &Bscc, s: &Strategy) -> Result<FrequencyProfile> {
    let n = cg.config_count();
    let local = b.local_index();
    let k = b.members.len();
    let mut a = Matrix::identity(k);
    for &e in &b.active_edges {
        let edge = &cg.edges()[e];
        let (i, j) = (local[edge.to].unwrap(), local[edge.from].unwrap());
        a[(i, j)] -= s.prob(e);
    }
    for j in 0..k {
        a[(k - 1, j)] = 1.0;
    }
    let mut rhs = vec![0.0; k];
    rhs[k - 1] = 1.0;
    let z = solve_linear(&a, &rhs)?;

    let mut config_freq = vec![0.0; n];
    for (i, &m) in b.members.iter().enumerate() {
        config_freq[m] = z[i];
    }
    let mut edge_freq = vec![0.0; cg.edge_count()];
    let mut total = 0.0;
    for &e in &b.active_edges {
        let edge = &cg.edges()[e];
        let d = config_freq[edge.from] * s.prob(e) * edge.tm;
        edge_freq[e] = d;
        total += d;
    }
    for &e in &b.active_edges {
        edge_freq[e] /= total;
    }
    Ok(FrequencyProfile {
        config_freq,
        edge_freq,
    })
}
