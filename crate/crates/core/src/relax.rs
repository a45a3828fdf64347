//! Smooth surrogate objectives and their gradients with respect to the
//! softmax coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{CRef, Combiner, Compiled, ERef, Expr, Node, Template};
use crate::linalg::Matrix;
use crate::model::{Coefficients, ConfigGraph};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxParams {
    /// Gate is `clamp(gate_scale · p, 0, 1)`.
    pub gate_scale: f64,
    pub softminmax_temperature: f64,
}

impl Default for RelaxParams {
    fn default() -> Self {
        RelaxParams {
            gate_scale: 1000.0,
            softminmax_temperature: 0.1,
        }
    }
}

impl RelaxParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gate_scale > 0.0 && self.gate_scale.is_finite()) {
            return Err(Error::InvalidParameter("gate_scale must be positive".into()));
        }
        if !(self.softminmax_temperature > 0.0 && self.softminmax_temperature.is_finite()) {
            return Err(Error::InvalidParameter(
                "softminmax_temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Builds the relaxed objective: min/max become log-sum-exp, active-set
/// templates range over everything, and traversal times inside active-edge
/// templates are gated by the edge probability.
///
/// The soft nodes read their temperature and gate scale at evaluation time,
/// so one relaxed tree serves an annealed run.
pub fn relax(e: &Expr) -> Expr {
    relax_in(e, false)
}

fn relax_template<F: Clone>(t: &Template<F>, in_edges: bool) -> Template<F> {
    Template {
        combiner: match t.combiner {
            Combiner::Min => Combiner::SoftMin,
            Combiner::Max => Combiner::SoftMax,
            c => c,
        },
        filter: t.filter.clone(),
        template: Box::new(relax_in(&t.template, in_edges)),
    }
}

fn relax_in(e: &Expr, in_edges: bool) -> Expr {
    let list = |v: &[Expr]| v.iter().map(|x| relax_in(x, in_edges)).collect::<Vec<_>>();
    match e {
        Expr::TravTime(r) if in_edges => {
            Expr::Mul(vec![Expr::TravTime(r.clone()), Expr::Gate(r.clone())])
        }
        Expr::Add(v) => Expr::Add(list(v)),
        Expr::Mul(v) => Expr::Mul(list(v)),
        Expr::Min(v) | Expr::SoftMin(v) => Expr::SoftMin(list(v)),
        Expr::Max(v) | Expr::SoftMax(v) => Expr::SoftMax(list(v)),
        Expr::Div { num, den } => Expr::div(relax_in(num, in_edges), relax_in(den, in_edges)),
        Expr::Sqrt(a) => Expr::sqrt(relax_in(a, in_edges)),
        Expr::OverActiveEdges(t) => Expr::OverAllEdges(relax_template(t, true)),
        Expr::OverAllEdges(t) => Expr::OverAllEdges(relax_template(t, in_edges)),
        Expr::OverActiveConfigs(t) | Expr::OverAllConfigs(t) => {
            Expr::OverAllConfigs(relax_template(t, in_edges))
        }
        other => other.clone(),
    }
}

/// A recorded relaxed evaluation.
pub struct Recording {
    pub tape: Tape,
    pub output: Var,
    /// Smallest argument seen by any `sqrt` node.
    pub min_sqrt_arg: f64,
    /// Smallest `|gate_scale · p − 1|` over gate nodes.
    pub gate_knee_distance: f64,
}

#[derive(Clone, Copy)]
enum Bound {
    Nothing,
    Edge(usize),
    Config(usize),
}

struct Builder<'a> {
    cg: &'a ConfigGraph,
    target_sets: &'a [Vec<bool>],
    rp: RelaxParams,
    tape: Tape,
    probs: Vec<Var>,
    hitting: Vec<Option<(Vec<Var>, Vec<Var>)>>,
    freq: Option<Vec<Var>>,
    min_sqrt_arg: f64,
    gate_knee_distance: f64,
}

impl Builder<'_> {
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
            (ERef::At(e), _) | (ERef::Bound, Bound::Edge(e)) => e,
            _ => unreachable!("placeholders are checked at compile time"),
        }
    }

    fn hitting(&mut self, set: usize) -> Result<&(Vec<Var>, Vec<Var>)> {
        if self.hitting[set].is_none() {
            let built = self.build_hitting(set)?;
            self.hitting[set] = Some(built);
        }
        Ok(self.hitting[set].as_ref().unwrap())
    }

    fn build_hitting(&mut self, set: usize) -> Result<(Vec<Var>, Vec<Var>)> {
        let cg = self.cg;
        let targets = &self.target_sets[set];
        let n = cg.config_count();
        if !targets.iter().any(|&t| t) {
            let inf = self.tape.constant(f64::INFINITY);
            return Ok((vec![inf; n], vec![inf; n]));
        }
        let unknowns: Vec<usize> = (0..n).filter(|&c| !targets[c]).collect();
        let mut local = vec![usize::MAX; n];
        for (i, &c) in unknowns.iter().enumerate() {
            local[c] = i;
        }
        let k = unknowns.len();
        let zero = self.tape.constant(0.0);
        let mut a_terms = Vec::new();
        let mut b = Vec::with_capacity(k);
        for (i, &v) in unknowns.iter().enumerate() {
            let mut terms = Vec::new();
            for e in cg.row(v) {
                let w = cg.edges()[e].to;
                terms.push((self.probs[e], cg.edges()[e].tm));
                if !targets[w] {
                    a_terms.push((i, local[w], self.probs[e], -1.0));
                }
            }
            b.push(self.tape.linear(terms, 0.0));
        }
        let x = self.tape.solve(Matrix::identity(k), a_terms.clone(), b)?;
        let times: Vec<Var> = (0..n)
            .map(|c| if targets[c] { zero } else { x[local[c]] })
            .collect();

        let mut b2 = Vec::with_capacity(k);
        for &v in &unknowns {
            let mut terms = Vec::new();
            for e in cg.row(v) {
                let edge = &cg.edges()[e];
                let p = self.probs[e];
                terms.push((p, edge.tm * edge.tm));
                if !targets[edge.to] {
                    let pt = self.tape.prod(vec![p, times[edge.to]]);
                    terms.push((pt, 2.0 * edge.tm));
                }
            }
            b2.push(self.tape.linear(terms, 0.0));
        }
        let y = self.tape.solve(Matrix::identity(k), a_terms, b2)?;
        let squared: Vec<Var> = (0..n)
            .map(|c| if targets[c] { zero } else { y[local[c]] })
            .collect();
        Ok((times, squared))
    }

    fn freq(&mut self) -> Result<&Vec<Var>> {
        if self.freq.is_none() {
            let built = self.build_freq()?;
            self.freq = Some(built);
        }
        Ok(self.freq.as_ref().unwrap())
    }

    fn build_freq(&mut self) -> Result<Vec<Var>> {
        let cg = self.cg;
        let n = cg.config_count();
        let mut a = Matrix::identity(n);
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut a_terms = Vec::new();
        for (e, edge) in cg.edges().iter().enumerate() {
            if edge.to != n - 1 {
                a_terms.push((edge.to, edge.from, self.probs[e], -1.0));
            }
        }
        let zero = self.tape.constant(0.0);
        let one = self.tape.constant(1.0);
        let mut b = vec![zero; n];
        b[n - 1] = one;
        let z = self.tape.solve(a, a_terms, b)?;
        let d: Vec<Var> = cg
            .edges()
            .iter()
            .enumerate()
            .map(|(e, edge)| {
                let zp = self.tape.prod(vec![z[edge.from], self.probs[e]]);
                self.tape.linear(vec![(zp, edge.tm)], 0.0)
            })
            .collect();
        let total = self.tape.sum(&d);
        Ok(d.into_iter().map(|x| self.tape.div(x, total)).collect())
    }

    fn combine(&mut self, combiner: Combiner, vals: Vec<Var>) -> Var {
        if vals.is_empty() {
            return self.tape.constant(match combiner {
                Combiner::Add => 0.0,
                _ => f64::NAN,
            });
        }
        let t = self.rp.softminmax_temperature;
        match combiner {
            Combiner::Add => self.tape.sum(&vals),
            Combiner::Min => self.tape.select(vals, false),
            Combiner::Max => self.tape.select(vals, true),
            Combiner::SoftMin => self.tape.lse(vals, -t),
            Combiner::SoftMax => self.tape.lse(vals, t),
        }
    }

    fn list(&mut self, v: &[Node], bound: Bound) -> Result<Vec<Var>> {
        v.iter().map(|n| self.node(n, bound)).collect()
    }

    fn node(&mut self, n: &Node, bound: Bound) -> Result<Var> {
        Ok(match n {
            Node::Const(c) => self.tape.constant(*c),
            Node::Hit { from, set } => {
                let c = self.config(*from, bound);
                self.hitting(*set)?.0[c]
            }
            Node::Hit2 { from, set } => {
                let c = self.config(*from, bound);
                self.hitting(*set)?.1[c]
            }
            Node::Freq(r) => {
                let e = self.edge(*r, bound);
                self.freq()?[e]
            }
            Node::Prob(r) => self.probs[self.edge(*r, bound)],
            Node::TravTime(r) => {
                let tm = self.cg.edges()[self.edge(*r, bound)].tm;
                self.tape.constant(tm)
            }
            Node::Gate(r) => {
                let p = self.probs[self.edge(*r, bound)];
                let z = self.tape.linear(vec![(p, self.rp.gate_scale)], 0.0);
                self.gate_knee_distance = self.gate_knee_distance.min((self.tape.value(z) - 1.0).abs());
                self.tape.hardtanh01(z)
            }
            Node::Add(v) => {
                let vals = self.list(v, bound)?;
                self.combine(Combiner::Add, vals)
            }
            Node::Mul(v) => {
                let vals = self.list(v, bound)?;
                self.tape.prod(vals)
            }
            Node::Div(a, b) => {
                let a = self.node(a, bound)?;
                let b = self.node(b, bound)?;
                self.tape.div(a, b)
            }
            Node::Min(v) | Node::Max(v) | Node::SoftMin(v) | Node::SoftMax(v) => {
                let vals = self.list(v, bound)?;
                let combiner = match n {
                    Node::Min(_) => Combiner::Min,
                    Node::Max(_) => Combiner::Max,
                    Node::SoftMin(_) => Combiner::SoftMin,
                    _ => Combiner::SoftMax,
                };
                self.combine(combiner, vals)
            }
            Node::Sqrt(a) => {
                let a = self.node(a, bound)?;
                self.min_sqrt_arg = self.min_sqrt_arg.min(self.tape.value(a));
                self.tape.sqrt(a)
            }
            // Under a strictly positive strategy every edge and configuration
            // is active, so active and full ranges coincide.
            Node::OverEdges {
                candidates,
                combiner,
                body,
                ..
            } => {
                let vals = candidates
                    .iter()
                    .map(|&e| self.node(body, Bound::Edge(e)))
                    .collect::<Result<Vec<_>>>()?;
                self.combine(*combiner, vals)
            }
            Node::OverConfigs {
                candidates,
                combiner,
                body,
                ..
            } => {
                let vals = candidates
                    .iter()
                    .map(|&c| self.node(body, Bound::Config(c)))
                    .collect::<Result<Vec<_>>>()?;
                self.combine(*combiner, vals)
            }
        })
    }
}

/// Records the relaxed objective at `softmax(c)` over the whole
/// configuration graph.
pub fn record(
    e: &Compiled,
    cg: &ConfigGraph,
    c: &Coefficients,
    rp: &RelaxParams,
    corrupt_adjoint: bool,
) -> Result<Recording> {
    assert_eq!(c.0.len(), cg.edge_count(), "one coefficient per config edge");
    let mut tape = Tape::new().with_corrupt_adjoint(corrupt_adjoint);
    let inputs: Vec<Var> = c.0.iter().map(|&x| tape.input(x)).collect();
    let mut probs = vec![0; cg.edge_count()];
    for v in 0..cg.config_count() {
        let row = cg.row(v);
        let p = tape.softmax_row(&inputs[row.clone()]);
        probs[row].copy_from_slice(&p);
    }
    let mut b = Builder {
        cg,
        target_sets: &e.target_sets,
        rp: *rp,
        tape,
        probs,
        hitting: vec![None; e.target_sets.len()],
        freq: None,
        min_sqrt_arg: f64::INFINITY,
        gate_knee_distance: f64::INFINITY,
    };
    let output = b.node(&e.root, Bound::Nothing)?;
    Ok(Recording {
        tape: b.tape,
        output,
        min_sqrt_arg: b.min_sqrt_arg,
        gate_knee_distance: b.gate_knee_distance,
    })
}

/// Relaxed value and its gradient with respect to every coefficient.
pub fn eval_with_gradient(
    e: &Compiled,
    cg: &ConfigGraph,
    c: &Coefficients,
    rp: &RelaxParams,
) -> Result<(f64, Vec<f64>)> {
    let r = record(e, cg, c, rp, false)?;
    Ok((r.tape.value(r.output), r.tape.gradient(r.output)))
}

/// Relaxed value alone.
pub fn eval_relaxed(e: &Compiled, cg: &ConfigGraph, c: &Coefficients, rp: &RelaxParams) -> Result<f64> {
    let r = record(e, cg, c, rp, false)?;
    Ok(r.tape.value(r.output))
}

/// Points closer than these to a kink or to a zero `sqrt` argument make
/// central differences meaningless and are screened out.
pub const SCREEN_SQRT_ARG: f64 = 1e-4;
pub const SCREEN_GATE_KNEE: f64 = 1e-2;
/// Relative rounding floor of a central difference with step 1e-5.
pub const RESOLUTION_FLOOR: f64 = 1e-6;

/// Whether `c` is far enough from non-smooth points for a difference check.
pub fn smooth_at(e: &Compiled, cg: &ConfigGraph, c: &Coefficients, rp: &RelaxParams) -> Result<bool> {
    let r = record(e, cg, c, rp, false)?;
    Ok(r.min_sqrt_arg >= SCREEN_SQRT_ARG && r.gate_knee_distance >= SCREEN_GATE_KNEE)
}

/// Max over coefficients of `|g − d| / (1e-9 + |g| + |d|)` where `g` is the
/// reverse-mode gradient and `d` the central difference with step `h`.
pub fn finite_diff_check(
    e: &Compiled,
    cg: &ConfigGraph,
    c: &Coefficients,
    rp: &RelaxParams,
    h: f64,
) -> Result<f64> {
    finite_diff_check_with(e, cg, c, rp, h, false)
}

pub fn finite_diff_check_with(
    e: &Compiled,
    cg: &ConfigGraph,
    c: &Coefficients,
    rp: &RelaxParams,
    h: f64,
    corrupt_adjoint: bool,
) -> Result<f64> {
    Ok(difference_components(e, cg, c, rp, h, corrupt_adjoint)?.max_error())
}

/// Analytic and central-difference gradients at one coefficient point.
#[derive(Debug, Clone)]
pub struct DifferenceCheck {
    pub value: f64,
    pub analytic: Vec<f64>,
    pub central: Vec<f64>,
}

impl DifferenceCheck {
    fn component_error(g: f64, d: f64) -> f64 {
        let err = (g - d).abs() / (1e-9 + g.abs() + d.abs());
        if err.is_nan() { f64::INFINITY } else { err }
    }

    pub fn max_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.central)
            .map(|(&g, &d)| Self::component_error(g, d))
            .fold(0.0, f64::max)
    }

    /// Components where both gradients are nonzero yet below
    /// `RESOLUTION_FLOOR · max(1, |f|)`: rounding in `f` decides their
    /// central difference, so it can neither confirm nor refute them.
    pub fn unresolved(&self, i: usize) -> bool {
        let m = self.analytic[i].abs().max(self.central[i].abs());
        m > 0.0 && m < RESOLUTION_FLOOR * self.value.abs().max(1.0)
    }

    pub fn unresolved_count(&self) -> usize {
        (0..self.analytic.len()).filter(|&i| self.unresolved(i)).count()
    }

    /// `max_error` over the resolved components.
    pub fn max_resolved_error(&self) -> f64 {
        (0..self.analytic.len())
            .filter(|&i| !self.unresolved(i))
            .map(|i| Self::component_error(self.analytic[i], self.central[i]))
            .fold(0.0, f64::max)
    }
}

pub fn difference_components(
    e: &Compiled,
    cg: &ConfigGraph,
    c: &Coefficients,
    rp: &RelaxParams,
    h: f64,
    corrupt_adjoint: bool,
) -> Result<DifferenceCheck> {
    let r = record(e, cg, c, rp, corrupt_adjoint)?;
    let analytic = r.tape.gradient(r.output);
    let mut central = Vec::with_capacity(analytic.len());
    let mut x = c.clone();
    for i in 0..x.0.len() {
        let orig = x.0[i];
        x.0[i] = orig + h;
        let up = eval_relaxed(e, cg, &x, rp)?;
        x.0[i] = orig - h;
        let down = eval_relaxed(e, cg, &x, rp)?;
        x.0[i] = orig;
        central.push((up - down) / (2.0 * h));
    }
    Ok(DifferenceCheck {
        value: r.tape.value(r.output),
        analytic,
        central,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::Bscc;
    use crate::eval::{eval_in_bscc, AtomCache, EvalValue};
    use crate::expr::{compile, ConfigPlaceholder, ConfigRef, EdgeFilter, EdgeRef, TargetSet};
    use crate::model::{build_config_graph, softmax_strategy, Graph};

    fn cg() -> ConfigGraph {
        let g = Graph::new(
            &["a", "b", "c"],
            &[("a", "a", 2), ("a", "b", 1), ("b", "c", 3), ("c", "a", 1), ("c", "b", 2)],
        )
        .unwrap();
        build_config_graph(&g, 2).unwrap()
    }

    fn coeffs(n: usize) -> Coefficients {
        Coefficients((0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect())
    }

    fn sample_objective() -> Expr {
        Expr::Add(vec![
            Expr::over_active_edges(
                Combiner::Max,
                EdgeFilter::default(),
                Expr::Add(vec![
                    Expr::TravTime(EdgeRef::bound()),
                    Expr::hitting(ConfigRef::bound(ConfigPlaceholder::To), TargetSet::of(&["a"])),
                ]),
            ),
            Expr::sqrt(Expr::over_active_edges(
                Combiner::Add,
                EdgeFilter::default(),
                Expr::Mul(vec![
                    Expr::Freq(EdgeRef::bound()),
                    Expr::squared_hitting(ConfigRef::bound(ConfigPlaceholder::From), TargetSet::of(&["b"])),
                ]),
            )),
            Expr::Min(vec![Expr::Prob(EdgeRef::concrete("a", "b", 0, 1)), Expr::Const(0.3)]),
        ])
    }

    #[test]
    fn relax_shapes() {
        let e = relax(&sample_objective());
        let s = serde_json::to_string(&e).unwrap();
        assert!(!s.contains("\"min\"") && !s.contains("\"max\"") && !s.contains("active"));
        assert!(s.contains("gate") && s.contains("soft_min") && s.contains("soft_max"));
    }

    #[test]
    fn soft_min_at_equal_arguments() {
        let g = Graph::new(&["a"], &[("a", "a", 1)]).unwrap();
        let cg = build_config_graph(&g, 1).unwrap();
        let e = compile(&relax(&Expr::Min(vec![Expr::Const(2.0), Expr::Const(2.0)])), &cg).unwrap();
        let rp = RelaxParams::default();
        let v = eval_relaxed(&e, &cg, &Coefficients(vec![0.0]), &rp).unwrap();
        assert!((v - (2.0 - 0.1 * 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn relaxed_value_matches_exact_evaluator_on_whole_graph() {
        let cg = cg();
        let e = compile(&relax(&sample_objective()), &cg).unwrap();
        let c = coeffs(cg.edge_count());
        let rp = RelaxParams::default();
        let v = eval_relaxed(&e, &cg, &c, &rp).unwrap();
        let s = softmax_strategy(&cg, &c);
        let exact = eval_in_bscc(&e, &cg, &Bscc::whole(&cg), &s, &mut AtomCache::new(), &rp);
        let EvalValue::Finite(x) = exact else { panic!("{exact:?}") };
        assert!((v - x).abs() <= 1e-10 * (1.0 + x.abs()), "{v} vs {x}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cg = cg();
        let e = compile(&relax(&sample_objective()), &cg).unwrap();
        let c = coeffs(cg.edge_count());
        let rp = RelaxParams::default();
        assert!(smooth_at(&e, &cg, &c, &rp).unwrap());
        let err = finite_diff_check(&e, &cg, &c, &rp, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
        let bad = finite_diff_check_with(&e, &cg, &c, &rp, 1e-5, true).unwrap();
        assert!(bad > 1e-2, "{bad}");
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let cg = cg();
        let e = compile(&Expr::Const(4.0), &cg).unwrap();
        let c = coeffs(cg.edge_count());
        let (v, g) = eval_with_gradient(&e, &cg, &c, &RelaxParams::default()).unwrap();
        assert_eq!(v, 4.0);
        assert!(g.iter().all(|&x| x == 0.0));
        assert_eq!(finite_diff_check(&e, &cg, &c, &RelaxParams::default(), 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn geometric_hitting_time_gradient() {
        // Self-loop at a with probability 1 - p, exit to b with p.
        let g = Graph::new(&["a", "b"], &[("a", "a", 1), ("a", "b", 1), ("b", "a", 1)]).unwrap();
        let cg = build_config_graph(&g, 1).unwrap();
        let e = compile(&Expr::hitting(ConfigRef::at("a", 0), TargetSet::of(&["b"])), &cg).unwrap();
        let c = Coefficients(vec![0.0, 0.0, 0.0]);
        let (v, grad) = eval_with_gradient(&e, &cg, &c, &RelaxParams::default()).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        // dT/dp = -1/p² = -4; dp/dc_exit = p(1-p) = 1/4, dp/dc_loop = -1/4.
        assert!((grad[1] + 1.0).abs() < 1e-12, "{grad:?}");
        assert!((grad[0] - 1.0).abs() < 1e-12);
        assert_eq!(grad[2], 0.0);
    }

    #[test]
    fn determinism() {
        let cg = cg();
        let e = compile(&relax(&sample_objective()), &cg).unwrap();
        let c = coeffs(cg.edge_count());
        let a = eval_with_gradient(&e, &cg, &c, &RelaxParams::default()).unwrap();
        let b = eval_with_gradient(&e, &cg, &c, &RelaxParams::default()).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }
}
