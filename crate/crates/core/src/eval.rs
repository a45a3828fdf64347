//! Exact evaluation of objectives inside a BSCC and selection of the
//! strategy value over all BSCCs.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::chain::{bsccs, frequencies, hitting_profile, Bscc, FrequencyProfile, HittingProfile};
use crate::error::Result;
use crate::expr::{compile, CRef, Combiner, Compiled, ERef, Expr, Node};
use crate::model::{build_config_graph, ConfigGraph, Graph, Strategy};
use crate::relax::RelaxParams;

/// A negative `sqrt` argument within this fraction of the largest summand
/// that produced it is rounding noise and evaluates as zero.
pub const SQRT_ROUNDING: f64 = 1e-9;

/// Extended-real result of an evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalValue {
    Finite(f64),
    Infinite,
    Undefined,
}

use EvalValue::{Finite, Infinite, Undefined};

impl EvalValue {
    pub fn is_defined(self) -> bool {
        !matches!(self, Undefined)
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Finite(x) => Some(x),
            _ => None,
        }
    }

    /// Orders defined values; `None` if either side is undefined.
    pub fn partial_cmp_defined(self, other: EvalValue) -> Option<Ordering> {
        match (self, other) {
            (Finite(a), Finite(b)) => a.partial_cmp(&b),
            (Finite(_), Infinite) => Some(Ordering::Less),
            (Infinite, Finite(_)) => Some(Ordering::Greater),
            (Infinite, Infinite) => Some(Ordering::Equal),
            _ => None,
        }
    }

    pub fn add(self, other: EvalValue) -> EvalValue {
        match (self, other) {
            (Undefined, _) | (_, Undefined) => Undefined,
            (Infinite, _) | (_, Infinite) => Infinite,
            (Finite(a), Finite(b)) => Finite(a + b),
        }
    }

    /// `0 · ∞` and negative multiples of `∞` are undefined.
    pub fn mul(self, other: EvalValue) -> EvalValue {
        match (self, other) {
            (Undefined, _) | (_, Undefined) => Undefined,
            (Infinite, Infinite) => Infinite,
            (Infinite, Finite(c)) | (Finite(c), Infinite) => {
                if c > 0.0 {
                    Infinite
                } else {
                    Undefined
                }
            }
            (Finite(a), Finite(b)) => Finite(a * b),
        }
    }

    pub fn div(self, den: EvalValue) -> EvalValue {
        match (self, den) {
            (Undefined, _) | (_, Undefined) => Undefined,
            (_, Finite(d)) if d == 0.0 => Undefined,
            (Infinite, Finite(d)) if d > 0.0 => Infinite,
            (Infinite, _) => Undefined,
            (Finite(_), Infinite) => Finite(0.0),
            (Finite(a), Finite(d)) => Finite(a / d),
        }
    }

    pub fn sqrt(self) -> EvalValue {
        match self {
            Finite(x) if x >= 0.0 => Finite(x.sqrt()),
            Finite(_) | Undefined => Undefined,
            Infinite => Infinite,
        }
    }

    pub fn min(self, other: EvalValue) -> EvalValue {
        match self.partial_cmp_defined(other) {
            None => Undefined,
            Some(Ordering::Greater) => other,
            Some(_) => self,
        }
    }

    pub fn max(self, other: EvalValue) -> EvalValue {
        match self.partial_cmp_defined(other) {
            None => Undefined,
            Some(Ordering::Less) => other,
            Some(_) => self,
        }
    }
}

impl fmt::Display for EvalValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finite(x) => write!(f, "{x}"),
            Infinite => write!(f, "inf"),
            Undefined => write!(f, "undefined"),
        }
    }
}

/// Temperature-scaled log-sum-exp over extended reals: `t·ln Σ exp(x/t)`
/// with `t > 0` for soft maximum and `t < 0` for soft minimum.
pub fn log_sum_exp(values: &[EvalValue], t: f64) -> EvalValue {
    if values.is_empty() || values.iter().any(|v| !v.is_defined()) {
        return Undefined;
    }
    let finite: Vec<f64> = values.iter().filter_map(|v| v.finite()).collect();
    if finite.len() < values.len() && (t > 0.0 || finite.is_empty()) {
        return Infinite;
    }
    Finite(lse(&finite, t))
}

pub(crate) fn lse(xs: &[f64], t: f64) -> f64 {
    let scaled = xs.iter().map(|x| x / t);
    let m = scaled.clone().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = scaled.map(|y| (y - m).exp()).sum();
    t * (m + s.ln())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Minimize,
    Maximize,
}

impl Direction {
    /// Whether `candidate` is strictly better than `incumbent`. Undefined
    /// candidates never improve; anything defined beats an undefined
    /// incumbent.
    pub fn improves(self, candidate: EvalValue, incumbent: EvalValue) -> bool {
        if !candidate.is_defined() {
            return false;
        }
        match candidate.partial_cmp_defined(incumbent) {
            None => true,
            Some(o) => match self {
                Direction::Minimize => o == Ordering::Less,
                Direction::Maximize => o == Ordering::Greater,
            },
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Direction::Minimize => 1.0,
            Direction::Maximize => -1.0,
        }
    }
}

/// Lazily computed chain quantities for one (strategy, BSCC) pair.
#[derive(Default)]
pub struct AtomCache {
    hitting: Vec<Option<HittingProfile>>,
    freq: Option<FrequencyProfile>,
    failed: bool,
}

impl AtomCache {
    pub fn new() -> Self {
        Self::default()
    }
}

struct Exact<'a> {
    cg: &'a ConfigGraph,
    s: &'a Strategy,
    b: &'a Bscc,
    target_sets: &'a [Vec<bool>],
    cache: &'a mut AtomCache,
    relax: RelaxParams,
}

#[derive(Clone, Copy)]
enum Bound {
    Nothing,
    Edge(usize),
    Config(usize),
}

impl Exact<'_> {
    fn profile(&mut self, set: usize) -> Option<&HittingProfile> {
        if self.cache.hitting.len() < self.target_sets.len() {
            self.cache.hitting.resize(self.target_sets.len(), None);
        }
        if self.cache.hitting[set].is_none() {
            match hitting_profile(self.cg, self.b, self.s, &self.target_sets[set]) {
                Ok(p) => self.cache.hitting[set] = Some(p),
                Err(_) => {
                    self.cache.failed = true;
                    return None;
                }
            }
        }
        self.cache.hitting[set].as_ref()
    }

    fn freq(&mut self) -> Option<&FrequencyProfile> {
        if self.cache.freq.is_none() {
            match frequencies(self.cg, self.b, self.s) {
                Ok(f) => self.cache.freq = Some(f),
                Err(_) => {
                    self.cache.failed = true;
                    return None;
                }
            }
        }
        self.cache.freq.as_ref()
    }

    fn config(&self, r: CRef, bound: Bound) -> usize {
        match (r, bound) {
            (CRef::At(c), _) => c,
            (CRef::BoundFrom, Bound::Edge(e)) => self.cg.edges()[e].from,
            (CRef::BoundTo, Bound::Edge(e)) => self.cg.edges()[e].to,
            (CRef::BoundConfig, Bound::Config(c)) => c,
            _ => unreachable!("placeholders are checked at compile time"),
        }
    }

    fn edge(&self, r: ERef, bound: Bound) -> usize {
        match (r, bound) {
            (ERef::At(e), _) => e,
            (ERef::Bound, Bound::Edge(e)) => e,
            _ => unreachable!("placeholders are checked at compile time"),
        }
    }

    fn hit(&mut self, from: CRef, set: usize, squared: bool, bound: Bound) -> EvalValue {
        let c = self.config(from, bound);
        if !self.b.contains(c) {
            return Undefined;
        }
        let Some(p) = self.profile(set) else {
            return Undefined;
        };
        let v = if squared { p.squared_times[c] } else { p.times[c] };
        match v {
            None => Undefined,
            Some(x) if x.is_infinite() => Infinite,
            Some(x) => Finite(x),
        }
    }

    fn combine(&self, combiner: Combiner, values: Vec<EvalValue>) -> EvalValue {
        match combiner {
            Combiner::Add => values.into_iter().fold(Finite(0.0), EvalValue::add),
            Combiner::Min => fold_nonempty(values, EvalValue::min),
            Combiner::Max => fold_nonempty(values, EvalValue::max),
            Combiner::SoftMin => log_sum_exp(&values, -self.relax.softminmax_temperature),
            Combiner::SoftMax => log_sum_exp(&values, self.relax.softminmax_temperature),
        }
    }

    fn list(&mut self, v: &[Node], bound: Bound) -> Vec<EvalValue> {
        v.iter().map(|n| self.eval(n, bound)).collect()
    }

    /// Sum nodes also report their largest summand magnitude.
    fn eval_with_scale(&mut self, n: &Node, bound: Bound) -> (EvalValue, f64) {
        if let Node::Add(terms) = n {
            let vals = self.list(terms, bound);
            let scale = vals
                .iter()
                .filter_map(|v| v.finite())
                .fold(0.0f64, |m, x| m.max(x.abs()));
            (vals.into_iter().fold(Finite(0.0), EvalValue::add), scale)
        } else {
            let v = self.eval(n, bound);
            (v, v.finite().map_or(0.0, f64::abs))
        }
    }

    fn eval(&mut self, n: &Node, bound: Bound) -> EvalValue {
        match n {
            Node::Const(c) => Finite(*c),
            Node::Hit { from, set } => self.hit(*from, *set, false, bound),
            Node::Hit2 { from, set } => self.hit(*from, *set, true, bound),
            Node::Freq(r) => {
                let e = self.edge(*r, bound);
                match self.freq() {
                    Some(f) => Finite(f.edge_freq[e]),
                    None => Undefined,
                }
            }
            Node::Prob(r) => Finite(self.s.prob(self.edge(*r, bound))),
            Node::TravTime(r) => Finite(self.cg.edges()[self.edge(*r, bound)].tm),
            Node::Gate(r) => {
                let p = self.s.prob(self.edge(*r, bound));
                Finite((self.relax.gate_scale * p).clamp(0.0, 1.0))
            }
            Node::Add(v) => {
                let vals = self.list(v, bound);
                self.combine(Combiner::Add, vals)
            }
            Node::Mul(v) => self
                .list(v, bound)
                .into_iter()
                .fold(Finite(1.0), EvalValue::mul),
            Node::Div(a, b) => {
                let num = self.eval(a, bound);
                let den = self.eval(b, bound);
                num.div(den)
            }
            Node::Min(v) | Node::Max(v) | Node::SoftMin(v) | Node::SoftMax(v) => {
                let combiner = match n {
                    Node::Min(_) => Combiner::Min,
                    Node::Max(_) => Combiner::Max,
                    Node::SoftMin(_) => Combiner::SoftMin,
                    _ => Combiner::SoftMax,
                };
                let vals = self.list(v, bound);
                self.combine(combiner, vals)
            }
            Node::Sqrt(a) => match self.eval_with_scale(a, bound) {
                (Finite(x), scale) if x < 0.0 && -x <= SQRT_ROUNDING * scale => Finite(0.0),
                (v, _) => v.sqrt(),
            },
            Node::OverEdges {
                active_only,
                candidates,
                combiner,
                body,
            } => {
                let mut vals = Vec::with_capacity(candidates.len());
                for &e in candidates {
                    if *active_only && !self.b.is_active(self.cg, self.s, e) {
                        continue;
                    }
                    vals.push(self.eval(body, Bound::Edge(e)));
                }
                self.combine(*combiner, vals)
            }
            Node::OverConfigs {
                active_only,
                candidates,
                combiner,
                body,
            } => {
                let mut vals = Vec::with_capacity(candidates.len());
                for &c in candidates {
                    if *active_only && !self.b.contains(c) {
                        continue;
                    }
                    vals.push(self.eval(body, Bound::Config(c)));
                }
                self.combine(*combiner, vals)
            }
        }
    }
}

fn fold_nonempty(values: Vec<EvalValue>, f: fn(EvalValue, EvalValue) -> EvalValue) -> EvalValue {
    let mut it = values.into_iter();
    match it.next() {
        None => Undefined,
        Some(first) => it.fold(first, f),
    }
}

/// Value of a compiled objective inside one BSCC.
///
/// Soft min/max and gate nodes (present only in relaxed objectives) use
/// `relax`; plain objectives ignore it.
pub fn eval_in_bscc(
    e: &Compiled,
    cg: &ConfigGraph,
    b: &Bscc,
    s: &Strategy,
    cache: &mut AtomCache,
    relax: &RelaxParams,
) -> EvalValue {
    let mut ev = Exact {
        cg,
        s,
        b,
        target_sets: &e.target_sets,
        cache,
        relax: *relax,
    };
    let v = ev.eval(&e.root, Bound::Nothing);
    if ev.cache.failed {
        Undefined
    } else {
        v
    }
}

/// A recurrent reachability optimization problem.
#[derive(Clone, Debug)]
pub struct Problem {
    pub graph: Graph,
    pub cg: ConfigGraph,
    pub direction: Direction,
    pub objective: Expr,
    pub compiled: Compiled,
}

impl Problem {
    pub fn new(graph: Graph, memory_count: usize, direction: Direction, objective: Expr) -> Result<Self> {
        let cg = build_config_graph(&graph, memory_count)?;
        let compiled = compile(&objective, &cg)?;
        Ok(Problem {
            graph,
            cg,
            direction,
            objective,
            compiled,
        })
    }

    pub fn memory_count(&self) -> usize {
        self.cg.memory_count()
    }
}

/// Best defined BSCC value of `s` and the BSCC attaining it.
pub fn sigma_value(p: &Problem, s: &Strategy) -> (EvalValue, Option<Bscc>) {
    sigma_value_of(&p.compiled, &p.cg, p.direction, s)
}

pub fn sigma_value_of(
    e: &Compiled,
    cg: &ConfigGraph,
    direction: Direction,
    s: &Strategy,
) -> (EvalValue, Option<Bscc>) {
    let mut best = (Undefined, None);
    for b in bsccs(cg, s) {
        let mut cache = AtomCache::new();
        let v = eval_in_bscc(e, cg, &b, s, &mut cache, &RelaxParams::default());
        if direction.improves(v, best.0) {
            best = (v, Some(b));
        }
    }
    best
}
