//! Builders for the standard objective families: mean payoff with its
//! deviation, renewal time with its deviation, and adversarial and
//! non-adversarial patrolling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Direction;
use crate::expr::{ConfigName, ConfigPlaceholder, ConfigRef, Combiner, EdgeFilter, EdgeRef, Expr, TargetSet};
use crate::model::ConfigGraph;

/// `π` must sum to one within this tolerance.
pub const ATTACK_DIST_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PayoffSpec {
    #[serde(default)]
    pub alpha: BTreeMap<String, f64>,
    #[serde(default)]
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<String>>,
    #[serde(default, rename = "pi", skip_serializing_if = "Option::is_none")]
    pub attack_dist: Option<BTreeMap<String, f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinKind {
    Mp,
    Renewal,
    AdversarialPatrol,
    Edam,
}

/// The builtin shorthand of an objective file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuiltinSpec {
    pub builtin: BuiltinKind,
    #[serde(flatten)]
    pub payoff: PayoffSpec,
}

/// An objective together with named sub-expressions reported alongside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub direction: Direction,
    pub expr: Expr,
    pub components: Vec<(String, Expr)>,
}

impl BuiltinSpec {
    pub fn build(&self, cg: &ConfigGraph) -> Result<Objective> {
        match self.builtin {
            BuiltinKind::Mp => mp_objective(&self.payoff, cg),
            BuiltinKind::Renewal => renewal_objective(&self.payoff, cg),
            BuiltinKind::AdversarialPatrol => adversarial_patrol_objective(&self.payoff, cg),
            BuiltinKind::Edam => edam_objective(&self.payoff, cg),
        }
    }

    /// Sets a numeric parameter by name; only `beta` is sweepable.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        match name {
            "beta" => {
                self.payoff.beta = value;
                Ok(())
            }
            other => Err(Error::InvalidParameter(format!(
                "`{other}` is not a sweepable parameter of the builtin objective"
            ))),
        }
    }
}

fn check_beta(ps: &PayoffSpec) -> Result<()> {
    if !(ps.beta >= 0.0 && ps.beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta must be nonnegative, got {}", ps.beta)));
    }
    Ok(())
}

fn payoff(ps: &PayoffSpec, v: &str) -> Result<f64> {
    let a = *ps.alpha.get(v).ok_or_else(|| Error::MissingPayoff(v.into()))?;
    if !(a >= 0.0 && a.is_finite()) {
        return Err(Error::InvalidParameter(format!("payoff of `{v}` must be nonnegative, got {a}")));
    }
    Ok(a)
}

fn targets(ps: &PayoffSpec, cg: &ConfigGraph) -> Result<Vec<String>> {
    let t = ps.targets.clone().unwrap_or_default();
    if t.is_empty() {
        return Err(Error::EmptyTargets);
    }
    for v in &t {
        if cg.base().vertex_index(v).is_none() {
            return Err(Error::UnknownReference(format!("target vertex `{v}`")));
        }
    }
    Ok(t)
}

fn out_freq_of_vertex(v: &str) -> Expr {
    Expr::over_active_edges(
        Combiner::Add,
        EdgeFilter {
            from_vertices: Some(vec![v.into()]),
            ..EdgeFilter::default()
        },
        Expr::Freq(EdgeRef::bound()),
    )
}

fn scaled(c: f64, e: Expr) -> Expr {
    Expr::Mul(vec![Expr::Const(c), e])
}

fn hit_to(target: &str) -> Expr {
    Expr::hitting(ConfigRef::bound(ConfigPlaceholder::To), TargetSet::of(&[target]))
}

fn trav() -> Expr {
    Expr::TravTime(EdgeRef::bound())
}

/// `MP = Σ F(v̂)·α(v)`, plus `β·DMP` when `β > 0`.
pub fn mp_objective(ps: &PayoffSpec, cg: &ConfigGraph) -> Result<Objective> {
    check_beta(ps)?;
    let g = cg.base();
    let alphas: Vec<(String, f64)> = g
        .vertices()
        .iter()
        .map(|v| Ok((v.clone(), payoff(ps, v)?)))
        .collect::<Result<_>>()?;
    let mp = Expr::Add(alphas.iter().map(|(v, a)| scaled(*a, out_freq_of_vertex(v))).collect());
    let dmp = Expr::sqrt(Expr::Add(
        alphas
            .iter()
            .map(|(v, a)| {
                let dev = Expr::Add(vec![mp.clone(), Expr::Const(-a)]);
                Expr::Mul(vec![out_freq_of_vertex(v), dev.clone(), dev])
            })
            .collect(),
    ));
    let expr = if ps.beta > 0.0 {
        Expr::Add(vec![mp.clone(), scaled(ps.beta, dmp.clone())])
    } else {
        mp.clone()
    };
    Ok(Objective {
        direction: Direction::Minimize,
        expr,
        components: vec![("mp".into(), mp), ("dmp".into(), dmp)],
    })
}

/// Visit frequency of configuration `c` up to a common factor: the sum of
/// `𝔽(ê)/tm(ê)` over its outgoing edges.
fn visits(cg: &ConfigGraph, c: usize) -> Expr {
    let g = cg.base();
    Expr::Add(
        cg.row(c)
            .map(|e| {
                let edge = &cg.edges()[e];
                let (from, to) = (cg.config(edge.from), cg.config(edge.to));
                scaled(
                    1.0 / edge.tm,
                    Expr::Freq(EdgeRef::concrete(
                        g.vertex_name(from.vertex),
                        g.vertex_name(to.vertex),
                        from.mem,
                        to.mem,
                    )),
                )
            })
            .collect(),
    )
}

/// Per-target return-time expressions `(ERen, DevRen)`.
fn renewal_parts(cg: &ConfigGraph, tau: &str) -> (Expr, Expr) {
    let v = cg.base().vertex_index(tau).expect("targets are checked");
    let m = cg.memory_count();
    let configs: Vec<usize> = (0..m).map(|k| cg.config_index(v, k)).collect();
    let all_visits = Expr::Add(configs.iter().map(|&c| visits(cg, c)).collect());
    let set = TargetSet::of(&[tau]);
    let to = ConfigRef::bound(ConfigPlaceholder::To);
    let mut eren = Vec::new();
    let mut qren = Vec::new();
    for (k, &c) in configs.iter().enumerate() {
        let share = Expr::div(visits(cg, c), all_visits.clone());
        let from_here = EdgeFilter {
            from_config: Some(ConfigName {
                vertex: tau.into(),
                mem: k,
            }),
            ..EdgeFilter::default()
        };
        let first = Expr::over_active_edges(
            Combiner::Add,
            from_here.clone(),
            Expr::Mul(vec![
                Expr::Prob(EdgeRef::bound()),
                Expr::Add(vec![trav(), Expr::hitting(to.clone(), set.clone())]),
            ]),
        );
        let second = Expr::over_active_edges(
            Combiner::Add,
            from_here,
            Expr::Mul(vec![
                Expr::Prob(EdgeRef::bound()),
                Expr::Add(vec![
                    Expr::Mul(vec![trav(), trav()]),
                    Expr::Mul(vec![Expr::Const(2.0), trav(), Expr::hitting(to.clone(), set.clone())]),
                    Expr::squared_hitting(to.clone(), set.clone()),
                ]),
            ]),
        );
        eren.push(Expr::Mul(vec![share.clone(), first]));
        qren.push(Expr::Mul(vec![share, second]));
    }
    let eren = Expr::Add(eren);
    let qren = Expr::Add(qren);
    let dev = Expr::sqrt(Expr::Add(vec![
        qren,
        Expr::Mul(vec![Expr::Const(-1.0), eren.clone(), eren.clone()]),
    ]));
    (eren, dev)
}

/// `max_τ (ERen(τ) + β·DevRen(τ))`.
pub fn renewal_objective(ps: &PayoffSpec, cg: &ConfigGraph) -> Result<Objective> {
    check_beta(ps)?;
    let ts = targets(ps, cg)?;
    let parts: Vec<(Expr, Expr)> = ts.iter().map(|t| renewal_parts(cg, t)).collect();
    let expr = Expr::Max(
        parts
            .iter()
            .map(|(e, d)| {
                if ps.beta > 0.0 {
                    Expr::Add(vec![e.clone(), scaled(ps.beta, d.clone())])
                } else {
                    e.clone()
                }
            })
            .collect(),
    );
    Ok(Objective {
        direction: Direction::Minimize,
        expr,
        components: vec![
            ("max_eren".into(), Expr::Max(parts.iter().map(|p| p.0.clone()).collect())),
            ("max_devren".into(), Expr::Max(parts.iter().map(|p| p.1.clone()).collect())),
        ],
    })
}

/// Worst case over active edges and targets of `α(τ)·(tm + 𝕋(û→C^τ))`.
pub fn adversarial_patrol_objective(ps: &PayoffSpec, cg: &ConfigGraph) -> Result<Objective> {
    let ts = targets(ps, cg)?;
    let per_target = ts
        .iter()
        .map(|t| Ok(scaled(payoff(ps, t)?, Expr::Add(vec![trav(), hit_to(t)]))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Objective {
        direction: Direction::Minimize,
        expr: Expr::over_active_edges(Combiner::Max, EdgeFilter::default(), Expr::Max(per_target)),
        components: Vec::new(),
    })
}

/// Expected damage of an attack drawn from `π` at a random moment.
pub fn edam_objective(ps: &PayoffSpec, cg: &ConfigGraph) -> Result<Objective> {
    let ts = targets(ps, cg)?;
    let pi = ps.attack_dist.as_ref().ok_or(Error::MissingAttackDistribution)?;
    let total: f64 = pi.values().sum();
    if (total - 1.0).abs() > ATTACK_DIST_TOLERANCE || pi.values().any(|&p| !(p >= 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "attack distribution must be nonnegative and sum to 1, sums to {total}"
        )));
    }
    if let Some(extra) = pi.keys().find(|k| !ts.contains(k)) {
        return Err(Error::InvalidParameter(format!("attack probability for non-target `{extra}`")));
    }
    let per_target = ts
        .iter()
        .map(|t| {
            let w = pi.get(t).copied().unwrap_or(0.0) * payoff(ps, t)?;
            Ok(scaled(w, Expr::Add(vec![scaled(0.5, trav()), hit_to(t)])))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Objective {
        direction: Direction::Minimize,
        expr: Expr::over_active_edges(
            Combiner::Add,
            EdgeFilter::default(),
            Expr::Mul(vec![Expr::Freq(EdgeRef::bound()), Expr::Add(per_target)]),
        ),
        components: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{sigma_value, EvalValue, Problem};
    use crate::expr::validate_expr;
    use crate::model::{build_config_graph, Graph, Strategy};

    fn two_cycle(tm: i64) -> Graph {
        Graph::new(&["t", "v"], &[("t", "v", tm), ("v", "t", tm)]).unwrap()
    }

    fn value(g: &Graph, o: &Objective, probs: Vec<f64>) -> EvalValue {
        let p = Problem::new(g.clone(), 1, o.direction, o.expr.clone()).unwrap();
        let s = Strategy::new(&p.cg, probs).unwrap();
        sigma_value(&p, &s).0
    }

    fn spec(alpha: &[(&str, f64)], targets: &[&str]) -> PayoffSpec {
        PayoffSpec {
            alpha: alpha.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            targets: Some(targets.iter().map(|s| s.to_string()).collect()),
            ..PayoffSpec::default()
        }
    }

    #[test]
    fn uniform_payoff_is_constant() {
        let g = Graph::new(&["a", "b"], &[("a", "a", 1), ("a", "b", 1), ("b", "a", 1)]).unwrap();
        let cg = build_config_graph(&g, 1).unwrap();
        let o = mp_objective(&spec(&[("a", 3.0), ("b", 3.0)], &[]), &cg).unwrap();
        for p in [0.1, 0.5, 0.9] {
            let EvalValue::Finite(x) = value(&g, &o, vec![1.0 - p, p, 1.0]) else { panic!() };
            assert!((x - 3.0).abs() < 1e-12);
        }
        let err = mp_objective(&spec(&[("a", 3.0)], &[]), &cg).unwrap_err();
        assert_eq!(err, Error::MissingPayoff("b".into()));
    }

    #[test]
    fn adversarial_two_cycle() {
        let g = two_cycle(1);
        let cg = build_config_graph(&g, 1).unwrap();
        let o = adversarial_patrol_objective(&spec(&[("t", 1.0)], &["t"]), &cg).unwrap();
        assert_eq!(value(&g, &o, vec![1.0, 1.0]), EvalValue::Finite(2.0));
        let o = adversarial_patrol_objective(&spec(&[("t", 3.0)], &["t"]), &cg).unwrap();
        assert_eq!(value(&g, &o, vec![1.0, 1.0]), EvalValue::Finite(6.0));
    }

    #[test]
    fn self_loop_targets() {
        let g = Graph::new(&["t"], &[("t", "t", 4)]).unwrap();
        let cg = build_config_graph(&g, 1).unwrap();
        let mut ps = spec(&[("t", 1.0)], &["t"]);
        let o = adversarial_patrol_objective(&ps, &cg).unwrap();
        assert_eq!(value(&g, &o, vec![1.0]), EvalValue::Finite(4.0));
        ps.attack_dist = Some([("t".to_string(), 1.0)].into());
        let o = edam_objective(&ps, &cg).unwrap();
        assert_eq!(value(&g, &o, vec![1.0]), EvalValue::Finite(2.0));
    }

    #[test]
    fn edam_two_cycle() {
        let g = two_cycle(1);
        let cg = build_config_graph(&g, 1).unwrap();
        let mut ps = spec(&[("t", 1.0)], &["t"]);
        assert_eq!(edam_objective(&ps, &cg).unwrap_err(), Error::MissingAttackDistribution);
        ps.attack_dist = Some([("t".to_string(), 1.0)].into());
        let o = edam_objective(&ps, &cg).unwrap();
        assert_eq!(value(&g, &o, vec![1.0, 1.0]), EvalValue::Finite(1.0));
        ps.alpha.insert("t".into(), 2.0);
        let o = edam_objective(&ps, &cg).unwrap();
        assert_eq!(value(&g, &o, vec![1.0, 1.0]), EvalValue::Finite(2.0));
    }

    #[test]
    fn renewal_on_cycle() {
        let g = two_cycle(3);
        let cg = build_config_graph(&g, 1).unwrap();
        let mut ps = spec(&[], &["t", "v"]);
        ps.beta = 0.5;
        let o = renewal_objective(&ps, &cg).unwrap();
        assert_eq!(value(&g, &o, vec![1.0, 1.0]), EvalValue::Finite(6.0));
        let dev = &o.components[1].1;
        let p = Problem::new(g.clone(), 1, Direction::Minimize, dev.clone()).unwrap();
        let s = Strategy::new(&p.cg, vec![1.0, 1.0]).unwrap();
        assert_eq!(sigma_value(&p, &s).0, EvalValue::Finite(0.0));
        assert_eq!(renewal_objective(&spec(&[], &[]), &cg).unwrap_err(), Error::EmptyTargets);
    }

    #[test]
    fn builders_validate() {
        let g = Graph::new(
            &["a", "b", "c"],
            &[("a", "b", 2), ("b", "c", 1), ("c", "a", 3), ("b", "a", 1)],
        )
        .unwrap();
        let cg = build_config_graph(&g, 2).unwrap();
        let mut ps = spec(&[("a", 1.0), ("b", 2.0), ("c", 4.0)], &["a", "c"]);
        ps.beta = 0.7;
        ps.attack_dist = Some([("a".to_string(), 0.25), ("c".to_string(), 0.75)].into());
        for o in [
            mp_objective(&ps, &cg).unwrap(),
            renewal_objective(&ps, &cg).unwrap(),
            adversarial_patrol_objective(&ps, &cg).unwrap(),
            edam_objective(&ps, &cg).unwrap(),
        ] {
            validate_expr(&o.expr, &cg).unwrap();
            for (_, c) in &o.components {
                validate_expr(c, &cg).unwrap();
            }
        }
    }

    #[test]
    fn builtin_spec_json() {
        let s: BuiltinSpec = serde_json::from_str(
            r#"{"builtin": "edam", "alpha": {"a": 1}, "targets": ["a"], "pi": {"a": 1.0}}"#,
        )
        .unwrap();
        assert_eq!(s.builtin, BuiltinKind::Edam);
        assert_eq!(s.payoff.beta, 0.0);
        let mut s = s;
        s.set_param("beta", 0.3).unwrap();
        assert!(s.set_param("gamma", 1.0).is_err());
    }
}
