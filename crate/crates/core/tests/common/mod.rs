#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrsynth::model::{build_config_graph, ConfigGraph, Graph, Strategy};

pub fn model(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("models").join(name)
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_rrsynth")
}

/// Strongly connected graph on 2..=6 vertices: a random Hamiltonian cycle
/// plus extra edges, traversal times in 1..=3.
pub fn random_graph(rng: &mut ChaCha8Rng, max_vertices: usize) -> Graph {
    random_graph_with_cycle(rng, max_vertices).0
}

/// As `random_graph`, also returning the Hamiltonian cycle's vertex order.
pub fn random_graph_with_cycle(rng: &mut ChaCha8Rng, max_vertices: usize) -> (Graph, Vec<usize>) {
    let n = rng.random_range(2..=max_vertices);
    let names: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        pairs.push((order[i], order[(i + 1) % n]));
    }
    for a in 0..n {
        for b in 0..n {
            if a != b && !pairs.contains(&(a, b)) && rng.random_bool(0.3) {
                pairs.push((a, b));
            }
        }
    }
    let edges: Vec<(String, String, i64)> = pairs
        .into_iter()
        .map(|(a, b)| (names[a].clone(), names[b].clone(), rng.random_range(1..=3)))
        .collect();
    (Graph::new(&names, &edges).expect("random graph is valid"), order)
}

/// Deterministic strategy walking the cycle `order` once per memory state,
/// switching memory after each lap, so every configuration is recurrent.
pub fn hamiltonian_strategy(cg: &ConfigGraph, order: &[usize]) -> Strategy {
    let (n, m) = (order.len(), cg.memory_count());
    let mut probs = vec![0.0; cg.edge_count()];
    for mem in 0..m {
        for i in 0..n {
            let next_mem = if i + 1 == n { (mem + 1) % m } else { mem };
            let from = cg.config_index(order[i], mem);
            let to = cg.config_index(order[(i + 1) % n], next_mem);
            probs[cg.edge_between(from, to).unwrap()] = 1.0;
        }
    }
    Strategy::new(cg, probs).unwrap()
}

/// A seeded random problem instance: graph, memory in 1..=2, its config graph.
pub fn random_instance(seed: u64) -> (Graph, ConfigGraph, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(&mut rng, 6);
    let memory = rng.random_range(1..=2);
    let cg = build_config_graph(&g, memory).unwrap();
    (g, cg, rng)
}

/// Random strategy where each edge survives with probability `keep` (at
/// least one per row), weights uniform in [0.1, 1).
pub fn random_strategy(cg: &ConfigGraph, rng: &mut ChaCha8Rng, keep: f64) -> Strategy {
    let mut probs = vec![0.0; cg.edge_count()];
    for c in 0..cg.config_count() {
        let row = cg.row(c);
        let forced = rng.random_range(row.clone());
        for e in row.clone() {
            if e == forced || rng.random_bool(keep) {
                probs[e] = rng.random_range(0.1..1.0);
            }
        }
        let total: f64 = probs[row.clone()].iter().sum();
        for p in &mut probs[row] {
            *p /= total;
        }
    }
    Strategy::new(cg, probs).unwrap()
}

pub fn positive_strategy(cg: &ConfigGraph, rng: &mut ChaCha8Rng) -> Strategy {
    random_strategy(cg, rng, 1.0)
}

/// Draws the next config edge from configuration `c`.
pub fn step(cg: &ConfigGraph, s: &Strategy, c: usize, rng: &mut ChaCha8Rng) -> usize {
    let row = cg.row(c);
    let mut u: f64 = rng.random();
    let last = row.end - 1;
    for e in row {
        let p = s.prob(e);
        if u < p {
            return e;
        }
        u -= p;
    }
    last
}

/// Time until the walk from `start` first stands on a target configuration.
pub fn hitting_sample(cg: &ConfigGraph, s: &Strategy, start: usize, targets: &[bool], rng: &mut ChaCha8Rng) -> f64 {
    let mut c = start;
    let mut t = 0.0;
    while !targets[c] {
        let e = step(cg, s, c, rng);
        t += cg.edges()[e].tm;
        c = cg.edges()[e].to;
    }
    t
}

/// Running mean with the standard error of i.i.d. samples.
#[derive(Default, Clone, Debug)]
pub struct MeanSe {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl MeanSe {
    pub fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n
    }

    pub fn se(&self) -> f64 {
        let var = (self.sum_sq / self.n - self.mean().powi(2)).max(0.0) * self.n / (self.n - 1.0);
        (var / self.n).sqrt()
    }

    /// `|mean − exact| ≤ 3 SE`, with a rounding allowance for deterministic samples.
    pub fn agrees(&self, exact: f64) -> bool {
        (self.mean() - exact).abs() <= 3.0 * self.se() + 1e-9 * (1.0 + exact.abs())
    }
}

/// Ratio estimator over batches: per-batch `num / den`, i.i.d. across batches
/// up to mixing, so the batch spread gives the standard error.
pub fn batch_ratio(batches: &[(f64, f64)]) -> MeanSe {
    let mut m = MeanSe::default();
    for &(num, den) in batches {
        m.push(num / den);
    }
    m
}

/// Configuration and edge visit statistics of a long walk inside a BSCC,
/// grouped into `batches` batches of `steps_per_batch` steps.
pub struct WalkStats {
    /// Per batch, per configuration: visit count and batch step count.
    pub config_visits: Vec<Vec<f64>>,
    /// Per batch, per config edge: time spent on the edge.
    pub edge_time: Vec<Vec<f64>>,
    pub batch_steps: f64,
    pub batch_time: Vec<f64>,
}

pub fn walk(cg: &ConfigGraph, s: &Strategy, start: usize, batches: usize, steps_per_batch: usize, rng: &mut ChaCha8Rng) -> WalkStats {
    let mut c = start;
    let mut config_visits = Vec::with_capacity(batches);
    let mut edge_time = Vec::with_capacity(batches);
    let mut batch_time = Vec::with_capacity(batches);
    for _ in 0..batches {
        let mut cv = vec![0.0; cg.config_count()];
        let mut et = vec![0.0; cg.edge_count()];
        let mut total = 0.0;
        for _ in 0..steps_per_batch {
            cv[c] += 1.0;
            let e = step(cg, s, c, rng);
            let tm = cg.edges()[e].tm;
            et[e] += tm;
            total += tm;
            c = cg.edges()[e].to;
        }
        config_visits.push(cv);
        edge_time.push(et);
        batch_time.push(total);
    }
    WalkStats {
        config_visits,
        edge_time,
        batch_steps: steps_per_batch as f64,
        batch_time,
    }
}

/// Successive return times to any configuration of `vertex` along a long
/// walk from `start`, with the squared times, in batches of `per_batch`
/// returns. Returns per-batch mean return time and mean squared return time.
pub fn return_batches(
    cg: &ConfigGraph,
    s: &Strategy,
    start: usize,
    vertex: usize,
    batches: usize,
    per_batch: usize,
    rng: &mut ChaCha8Rng,
) -> (MeanSe, MeanSe) {
    let at_vertex = |c: usize| cg.config(c).vertex == vertex;
    let mut c = start;
    while !at_vertex(c) {
        c = cg.edges()[step(cg, s, c, rng)].to;
    }
    let (mut first, mut second) = (MeanSe::default(), MeanSe::default());
    for _ in 0..batches {
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..per_batch {
            let mut t = 0.0;
            loop {
                let e = step(cg, s, c, rng);
                t += cg.edges()[e].tm;
                c = cg.edges()[e].to;
                if at_vertex(c) {
                    break;
                }
            }
            m1 += t;
            m2 += t * t;
        }
        first.push(m1 / per_batch as f64);
        second.push(m2 / per_batch as f64);
    }
    (first, second)
}

/// BSCCs from the definition: reflexive-transitive closure over positive
/// edges, then keep the classes every reachable configuration can leave
/// only to return to.
pub fn brute_bsccs(cg: &ConfigGraph, s: &Strategy) -> Vec<Vec<usize>> {
    let n = cg.config_count();
    let mut reach = vec![vec![false; n]; n];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
        for e in cg.row(i) {
            if s.prob(e) > 0.0 {
                row[cg.edges()[e].to] = true;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    let mut out: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let class: Vec<usize> = (0..n).filter(|&j| reach[i][j]).collect();
        if class.iter().all(|&j| reach[j][i]) && !out.contains(&class) {
            out.push(class);
        }
    }
    out.sort();
    out
}

/// Edge index between two configurations given as (vertex, mem) pairs.
pub fn cedge(cg: &ConfigGraph, from: (&str, usize), to: (&str, usize)) -> usize {
    let f = cg.resolve_config(from.0, from.1).unwrap();
    let t = cg.resolve_config(to.0, to.1).unwrap();
    cg.edge_between(f, t).unwrap()
}

/// Strategy from explicit probabilities; unlisted rows go to their first edge.
pub fn strategy_with(cg: &ConfigGraph, entries: &[((&str, usize), (&str, usize), f64)]) -> Strategy {
    let mut probs = vec![0.0; cg.edge_count()];
    let mut set = vec![false; cg.config_count()];
    for &(f, t, p) in entries {
        let e = cedge(cg, f, t);
        probs[e] = p;
        set[cg.edges()[e].from] = true;
    }
    for c in 0..cg.config_count() {
        if !set[c] {
            probs[cg.row(c).start] = 1.0;
        }
    }
    Strategy::new(cg, probs).unwrap()
}

/// Outcome of comparing the chain analysis with simulation on one instance.
#[derive(Debug)]
pub struct OracleReport {
    pub seed: u64,
    pub failures: Vec<String>,
    /// Comparisons that exceeded 3 SE and were re-run at 10x the samples.
    pub reruns: Vec<String>,
}

fn hitting_sim(cg: &ConfigGraph, s: &Strategy, start: usize, targets: &[bool], episodes: usize, rng: &mut ChaCha8Rng) -> [MeanSe; 2] {
    let (mut m1, mut m2) = (MeanSe::default(), MeanSe::default());
    for _ in 0..episodes {
        let x = hitting_sample(cg, s, start, targets, rng);
        m1.push(x);
        m2.push(x * x);
    }
    [m1, m2]
}

fn frequency_sim(cg: &ConfigGraph, s: &Strategy, c0: usize, e0: usize, batches: usize, steps: usize, rng: &mut ChaCha8Rng) -> [MeanSe; 2] {
    let w = walk(cg, s, c0, batches, steps, rng);
    let cf: Vec<(f64, f64)> = w.config_visits.iter().map(|v| (v[c0], w.batch_steps)).collect();
    let ef: Vec<(f64, f64)> = w.edge_time.iter().zip(&w.batch_time).map(|(t, &bt)| (t[e0], bt)).collect();
    [batch_ratio(&cf), batch_ratio(&ef)]
}

/// Checks `names[i]` against `exact[i]`. A miss is re-run once on an
/// independent stream with ten times the samples, and only that decides.
fn compare(
    names: [&str; 2],
    exact: [f64; 2],
    first: [MeanSe; 2],
    rerun: impl FnOnce() -> [MeanSe; 2],
    failures: &mut Vec<String>,
    reruns: &mut Vec<String>,
) {
    let describe = |m: &MeanSe, x: f64| format!("{x} vs simulated {} ± {} ({:.2} SE)", m.mean(), m.se(), (m.mean() - x).abs() / m.se());
    if first.iter().zip(exact).all(|(m, x)| m.agrees(x)) {
        return;
    }
    let second = rerun();
    for i in 0..2 {
        if !first[i].agrees(exact[i]) {
            reruns.push(format!("{}: {}; rerun {}", names[i], describe(&first[i], exact[i]), describe(&second[i], exact[i])));
        }
        if !second[i].agrees(exact[i]) {
            failures.push(format!("{}: {}", names[i], describe(&second[i], exact[i])));
        }
    }
}

/// Compares `bsccs` with the closure oracle and hitting times, squared
/// hitting times and frequencies with simulation on the instance `seed`.
pub fn chain_oracle(seed: u64, episodes: usize, batches: usize, steps_per_batch: usize) -> OracleReport {
    use rrsynth::chain::{bsccs, frequencies, hitting_profile};

    let (_, cg, mut rng) = random_instance(seed);
    let s = random_strategy(&cg, &mut rng, 0.6);
    let mut failures = Vec::new();
    let mut reruns = Vec::new();
    let found = bsccs(&cg, &s);
    let members: Vec<Vec<usize>> = {
        let mut m: Vec<_> = found.iter().map(|b| b.members.clone()).collect();
        m.sort();
        m
    };
    let expected = brute_bsccs(&cg, &s);
    if members != expected {
        failures.push(format!("bsccs {members:?} vs closure oracle {expected:?}"));
    }
    for b in &found {
        let active: Vec<usize> = (0..cg.edge_count()).filter(|&e| b.is_active(&cg, &s, e)).collect();
        if active != b.active_edges {
            failures.push(format!("active edges of {:?}", b.members));
        }
    }
    let b = &found[0];
    let vertex = cg.config(b.members[rng.random_range(0..b.members.len())]).vertex;
    let targets: Vec<bool> = (0..cg.config_count()).map(|c| cg.config(c).vertex == vertex).collect();
    let start = b.members.iter().copied().find(|&m| !targets[m]).unwrap_or(b.members[0]);
    let hp = hitting_profile(&cg, b, &s, &targets).unwrap();
    let mut confirm = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    compare(
        ["hitting time", "squared hitting time"],
        [hp.times[start].unwrap(), hp.squared_times[start].unwrap()],
        hitting_sim(&cg, &s, start, &targets, episodes, &mut rng),
        || hitting_sim(&cg, &s, start, &targets, 10 * episodes, &mut confirm),
        &mut failures,
        &mut reruns,
    );
    let fp = frequencies(&cg, b, &s).unwrap();
    let (c0, e0) = (b.members[0], b.active_edges[0]);
    compare(
        ["config frequency", "edge frequency"],
        [fp.config_freq[c0], fp.edge_freq[e0]],
        frequency_sim(&cg, &s, c0, e0, batches, steps_per_batch, &mut rng),
        || frequency_sim(&cg, &s, c0, e0, batches, 10 * steps_per_batch, &mut confirm),
        &mut failures,
        &mut reruns,
    );
    OracleReport { seed, failures, reruns }
}

/// `(ERen, DevRen)` of the single target `target` in the BSCC containing `start`.
pub fn renewal_of(g: &Graph, memory: usize, s: &Strategy, target: &str, start: usize) -> (f64, f64) {
    use rrsynth::io::Loaded;
    use rrsynth::objectives::{renewal_objective, PayoffSpec};

    let cg = build_config_graph(g, memory).unwrap();
    let spec = PayoffSpec {
        targets: Some(vec![target.to_string()]),
        ..PayoffSpec::default()
    };
    let loaded = Loaded::new(g.clone(), memory, None, renewal_objective(&spec, &cg).unwrap()).unwrap();
    let b = rrsynth::chain::bsccs(&cg, s).into_iter().find(|b| b.contains(start)).unwrap();
    let values = loaded.component_values(s, Some(&b));
    let get = |name: &str| values.iter().find(|(n, _)| n == name).unwrap().1.finite().unwrap();
    (get("max_eren"), get("max_devren"))
}

pub const KINDS: [rrsynth::objectives::BuiltinKind; 4] = {
    use rrsynth::objectives::BuiltinKind::*;
    [Mp, Renewal, AdversarialPatrol, Edam]
};

/// Builtin spec with `α(v) = 1 + index(v)`, β = 0.3 and a uniform attack
/// distribution over `targets`.
pub fn spec_for(kind: rrsynth::objectives::BuiltinKind, g: &Graph, targets: &[String]) -> rrsynth::objectives::BuiltinSpec {
    use rrsynth::objectives::{BuiltinSpec, PayoffSpec};

    let alpha = g.vertices().iter().enumerate().map(|(i, v)| (v.clone(), 1.0 + i as f64)).collect();
    let pi = targets.iter().map(|t| (t.clone(), 1.0 / targets.len() as f64)).collect();
    BuiltinSpec {
        builtin: kind,
        payoff: PayoffSpec {
            alpha,
            beta: 0.3,
            targets: Some(targets.to_vec()),
            attack_dist: Some(pi),
        },
    }
}
