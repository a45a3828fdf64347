//! File formats and the experiment harness behind the command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::chain::Bscc;
use crate::error::{Error, Result};
use crate::eval::{eval_in_bscc, sigma_value, AtomCache, Direction, EvalValue, Problem};
use crate::expr::{compile, Compiled, Expr};
use crate::model::{build_config_graph, validate_graph, ConfigGraph, Graph, Strategy};
use crate::objectives::{BuiltinSpec, Objective};
use crate::optimizer::{best_index, relaxed_objective, run_trial, OptimizerConfig, TrialResult};
use crate::relax::{difference_components, smooth_at, RelaxParams};

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_UNDEFINED: u8 = 2;
pub const EXIT_GRADIENT_MISMATCH: u8 = 3;
pub const EXIT_USAGE: u8 = 64;

/// Pass bound for `check-gradients`.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_STEP: f64 = 1e-5;
/// Screened-out sample points are redrawn at most this many times each.
const MAX_REDRAWS: usize = 100;

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, source_name: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        source_name: source_name.into(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeFile {
    from: String,
    to: String,
    tm: i64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    vertices: Vec<String>,
    edges: Vec<EdgeFile>,
    /// Every listed edge also exists in the opposite direction.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    undirected: bool,
}

pub fn parse_graph(text: &str, source_name: &str) -> Result<Graph> {
    let f: GraphFile = parse_json(text, source_name)?;
    let mut edges: Vec<(String, String, i64)> = Vec::new();
    for e in &f.edges {
        edges.push((e.from.clone(), e.to.clone(), e.tm));
        if f.undirected && e.from != e.to {
            edges.push((e.to.clone(), e.from.clone(), e.tm));
        }
    }
    let g = Graph::new(&f.vertices, &edges)?;
    validate_graph(&g)?;
    Ok(g)
}

pub fn load_graph(path: &Path) -> Result<Graph> {
    parse_graph(&read(path)?, &path.display().to_string())
}

pub fn write_graph(g: &Graph) -> String {
    let f = GraphFile {
        vertices: g.vertices().to_vec(),
        edges: g
            .edges()
            .iter()
            .map(|e| EdgeFile {
                from: g.vertex_name(e.from).into(),
                to: g.vertex_name(e.to).into(),
                tm: e.tm,
            })
            .collect(),
        undirected: false,
    };
    serde_json::to_string_pretty(&f).expect("graph serializes") + "\n"
}

/// An objective file: builtin shorthand, or a syntax tree with optional
/// direction and named components.
#[derive(Clone, Debug, PartialEq)]
pub enum ObjectiveFile {
    Builtin(BuiltinSpec),
    Ast {
        direction: Direction,
        expr: Expr,
        components: Vec<(String, Expr)>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AstFile {
    #[serde(default)]
    direction: Direction,
    objective: Expr,
    #[serde(default)]
    components: BTreeMap<String, Expr>,
}

impl ObjectiveFile {
    pub fn build(&self, cg: &ConfigGraph) -> Result<Objective> {
        match self {
            ObjectiveFile::Builtin(b) => b.build(cg),
            ObjectiveFile::Ast {
                direction,
                expr,
                components,
            } => Ok(Objective {
                direction: *direction,
                expr: expr.clone(),
                components: components.clone(),
            }),
        }
    }
}

pub fn parse_objective(text: &str, source_name: &str) -> Result<ObjectiveFile> {
    let v: Value = parse_json(text, source_name)?;
    let shape_error = |e: serde_json::Error| Error::Parse {
        source_name: source_name.into(),
        line: 0,
        column: 0,
        message: e.to_string(),
    };
    if v.get("builtin").is_some() {
        return serde_json::from_value(v).map(ObjectiveFile::Builtin).map_err(shape_error);
    }
    if v.get("objective").is_some() {
        let f: AstFile = serde_json::from_value(v).map_err(shape_error)?;
        return Ok(ObjectiveFile::Ast {
            direction: f.direction,
            expr: f.objective,
            components: f.components.into_iter().collect(),
        });
    }
    let expr: Expr = serde_json::from_value(v).map_err(shape_error)?;
    Ok(ObjectiveFile::Ast {
        direction: Direction::Minimize,
        expr,
        components: Vec::new(),
    })
}

pub fn load_objective(path: &Path) -> Result<ObjectiveFile> {
    parse_objective(&read(path)?, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessorEntry {
    pub vertex: String,
    pub mem: usize,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub vertex: String,
    pub mem: usize,
    pub successors: Vec<SuccessorEntry>,
}

/// Every configuration row with every successor, zeros included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyFile {
    pub memory: usize,
    pub rows: Vec<StrategyRow>,
}

pub fn strategy_file(cg: &ConfigGraph, s: &Strategy) -> StrategyFile {
    let g = cg.base();
    StrategyFile {
        memory: cg.memory_count(),
        rows: (0..cg.config_count())
            .map(|c| {
                let cf = cg.config(c);
                StrategyRow {
                    vertex: g.vertex_name(cf.vertex).into(),
                    mem: cf.mem,
                    successors: cg
                        .row(c)
                        .map(|e| {
                            let to = cg.config(cg.edges()[e].to);
                            SuccessorEntry {
                                vertex: g.vertex_name(to.vertex).into(),
                                mem: to.mem,
                                prob: s.prob(e),
                            }
                        })
                        .collect(),
                }
            })
            .collect(),
    }
}

pub fn write_strategy(cg: &ConfigGraph, s: &Strategy) -> String {
    serde_json::to_string_pretty(&strategy_file(cg, s)).expect("strategy serializes") + "\n"
}

/// Builds a strategy from a file; successors not listed get probability 0.
pub fn strategy_from_file(cg: &ConfigGraph, f: &StrategyFile) -> Result<Strategy> {
    if f.memory != cg.memory_count() {
        return Err(Error::InvalidStrategy(format!(
            "strategy has memory {}, problem has {}",
            f.memory,
            cg.memory_count()
        )));
    }
    let mut probs = vec![0.0; cg.edge_count()];
    let mut seen = vec![false; cg.edge_count()];
    for row in &f.rows {
        let from = cg
            .resolve_config(&row.vertex, row.mem)
            .ok_or_else(|| Error::UnknownReference(format!("configuration ({},{})", row.vertex, row.mem)))?;
        for succ in &row.successors {
            let to = cg
                .resolve_config(&succ.vertex, succ.mem)
                .ok_or_else(|| Error::UnknownReference(format!("configuration ({},{})", succ.vertex, succ.mem)))?;
            let e = cg.edge_between(from, to).ok_or_else(|| {
                Error::InvalidStrategy(format!(
                    "no edge {} -> {}",
                    cg.config_label(from),
                    cg.config_label(to)
                ))
            })?;
            if seen[e] {
                return Err(Error::InvalidStrategy(format!("edge {} listed twice", cg.edge_label(e))));
            }
            seen[e] = true;
            probs[e] = succ.prob;
        }
    }
    Strategy::new(cg, probs)
}

pub fn parse_strategy(cg: &ConfigGraph, text: &str, source_name: &str) -> Result<Strategy> {
    strategy_from_file(cg, &parse_json(text, source_name)?)
}

pub fn load_strategy(cg: &ConfigGraph, path: &Path) -> Result<Strategy> {
    parse_strategy(cg, &read(path)?, &path.display().to_string())
}

/// `inf` / `undefined` for the non-finite cases.
pub fn value_text(v: EvalValue) -> String {
    match v {
        EvalValue::Finite(x) => format!("{x}"),
        EvalValue::Infinite => "inf".into(),
        EvalValue::Undefined => "undefined".into(),
    }
}

pub fn value_json(v: EvalValue) -> Value {
    match v {
        EvalValue::Finite(x) => json!(x),
        other => json!(value_text(other)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub graph_path: PathBuf,
    pub objective_path: PathBuf,
    pub memory_count: usize,
    /// Overrides the objective file's direction.
    pub direction: Option<Direction>,
    pub optimizer: OptimizerConfig,
    pub n_trials: usize,
    pub out_dir: PathBuf,
    /// Record wall-clock time per trial; off by default so output files are
    /// reproducible byte for byte.
    pub timing: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub param: String,
    pub values: Vec<f64>,
    pub trials_per_value: usize,
}

/// A problem plus compiled reporting components.
pub struct Loaded {
    pub problem: Problem,
    pub components: Vec<(String, Compiled)>,
}

impl Loaded {
    pub fn new(graph: Graph, memory: usize, direction: Option<Direction>, objective: Objective) -> Result<Self> {
        let cg = build_config_graph(&graph, memory)?;
        let components = objective
            .components
            .iter()
            .map(|(n, e)| Ok((n.clone(), compile(e, &cg)?)))
            .collect::<Result<Vec<_>>>()?;
        let problem = Problem::new(graph, memory, direction.unwrap_or(objective.direction), objective.expr)?;
        Ok(Loaded { problem, components })
    }

    /// Component values in the BSCC that realizes the σ-value.
    pub fn component_values(&self, s: &Strategy, b: Option<&Bscc>) -> Vec<(String, EvalValue)> {
        self.components
            .iter()
            .map(|(n, c)| {
                let v = match b {
                    Some(b) => eval_in_bscc(c, &self.problem.cg, b, s, &mut AtomCache::new(), &RelaxParams::default()),
                    None => EvalValue::Undefined,
                };
                (n.clone(), v)
            })
            .collect()
    }
}

pub fn load_problem(graph: &Path, objective: &Path, memory: usize, direction: Option<Direction>) -> Result<Loaded> {
    let g = load_graph(graph)?;
    let cg = build_config_graph(&g, memory)?;
    let obj = load_objective(objective)?.build(&cg)?;
    Loaded::new(g, memory, direction, obj)
}

struct TimedTrial {
    result: TrialResult,
    wall_ms: f64,
}

fn run_timed_trials(p: &Problem, oc: &OptimizerConfig, n: usize) -> Result<Vec<TimedTrial>> {
    if n == 0 {
        return Err(Error::InvalidParameter("at least one trial is required".into()));
    }
    oc.validate()?;
    let relaxed = relaxed_objective(p)?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let start = Instant::now();
            let result = run_trial(p, &relaxed, oc, i);
            TimedTrial {
                result,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            }
        })
        .collect())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("cannot create {}: {e}", dir.display())))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn csv_text(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn support_text(cg: &ConfigGraph, b: Option<&Bscc>) -> String {
    b.map(|b| {
        b.active_edges
            .iter()
            .map(|&e| cg.edge_label(e))
            .collect::<Vec<_>>()
            .join(" ")
    })
    .unwrap_or_default()
}

/// Outcome of `optimize`: exit code and the summary document.
pub fn run_optimize(m: &RunManifest) -> Result<(u8, Value)> {
    let loaded = load_problem(&m.graph_path, &m.objective_path, m.memory_count, m.direction)?;
    let p = &loaded.problem;
    ensure_dir(&m.out_dir)?;
    let trials = run_timed_trials(p, &m.optimizer, m.n_trials)?;
    let results: Vec<TrialResult> = trials.iter().map(|t| t.result.clone()).collect();
    let bi = best_index(p.direction, &results);
    let best = &results[bi];

    let mut rows = vec![vec!["trial", "seed", "best_value", "best_step", "wall_ms"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()];
    for (i, t) in trials.iter().enumerate() {
        rows.push(vec![
            i.to_string(),
            t.result.seed.to_string(),
            value_text(t.result.best_value),
            t.result.best_step.map(|s| s.to_string()).unwrap_or_default(),
            if m.timing { format!("{:.3}", t.wall_ms) } else { String::new() },
        ]);
    }
    write(&m.out_dir.join("trials.csv"), &csv_text(rows)?)?;
    write(&m.out_dir.join("best_strategy.json"), &write_strategy(&p.cg, &best.best_strategy))?;

    let (value, bscc) = sigma_value(p, &best.best_strategy);
    let components: serde_json::Map<String, Value> = loaded
        .component_values(&best.best_strategy, bscc.as_ref())
        .into_iter()
        .map(|(n, v)| (n, value_json(v)))
        .collect();
    let summary = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "direction": p.direction,
        "best_value": value_json(value),
        "best_trial": bi,
        "best_seed": best.seed,
        "best_step": best.best_step,
        "components": components,
        "support": support_text(&p.cg, bscc.as_ref()),
        "config": {
            "graph": m.graph_path.display().to_string(),
            "objective": m.objective_path.display().to_string(),
            "memory": m.memory_count,
            "trials": m.n_trials,
            "optimizer": m.optimizer,
        },
    });
    write(
        &m.out_dir.join("summary.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    let code = if value.is_defined() { EXIT_OK } else { EXIT_UNDEFINED };
    Ok((code, summary))
}

/// One per-value best of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub param_value: f64,
    pub best_trial: usize,
    pub best_value: EvalValue,
    pub components: Vec<(String, EvalValue)>,
    pub support: String,
    pub best_strategy: Strategy,
}

pub fn run_sweep(m: &RunManifest, s: &SweepSpec) -> Result<(u8, Vec<SweepPoint>)> {
    if s.values.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one value".into()));
    }
    let g = load_graph(&m.graph_path)?;
    let cg = build_config_graph(&g, m.memory_count)?;
    let ObjectiveFile::Builtin(spec) = load_objective(&m.objective_path)? else {
        return Err(Error::InvalidParameter("sweeps need a builtin objective".into()));
    };
    ensure_dir(&m.out_dir)?;
    let mut names: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut points = Vec::new();
    for &x in &s.values {
        let mut spec = spec.clone();
        spec.set_param(&s.param, x)?;
        let loaded = Loaded::new(g.clone(), m.memory_count, m.direction, spec.build(&cg)?)?;
        let p = &loaded.problem;
        names = loaded.components.iter().map(|(n, _)| n.clone()).collect();
        let trials = run_timed_trials(p, &m.optimizer, s.trials_per_value)?;
        let results: Vec<TrialResult> = trials.into_iter().map(|t| t.result).collect();
        for (i, r) in results.iter().enumerate() {
            let (v, b) = sigma_value(p, &r.best_strategy);
            let mut row = vec![format!("{x}"), i.to_string(), value_text(v)];
            row.extend(
                loaded
                    .component_values(&r.best_strategy, b.as_ref())
                    .into_iter()
                    .map(|(_, c)| value_text(c)),
            );
            rows.push(row);
        }
        let bi = best_index(p.direction, &results);
        let best = &results[bi];
        let (v, b) = sigma_value(p, &best.best_strategy);
        points.push(SweepPoint {
            param_value: x,
            best_trial: bi,
            best_value: v,
            components: loaded.component_values(&best.best_strategy, b.as_ref()),
            support: support_text(&p.cg, b.as_ref()),
            best_strategy: best.best_strategy.clone(),
        });
    }
    let mut header = vec!["param_value".to_string(), "trial".into(), "best_value".into()];
    header.extend(names.iter().cloned());
    rows.insert(0, header);
    write(&m.out_dir.join("sweep.csv"), &csv_text(rows)?)?;

    let mut summary = vec![{
        let mut h = vec!["param_value".to_string(), "best_trial".into(), "best_value".into()];
        h.extend(names.iter().cloned());
        h.push("support".into());
        h
    }];
    for pt in &points {
        let mut r = vec![format!("{}", pt.param_value), pt.best_trial.to_string(), value_text(pt.best_value)];
        r.extend(pt.components.iter().map(|(_, v)| value_text(*v)));
        r.push(pt.support.clone());
        summary.push(r);
    }
    write(&m.out_dir.join("sweep_summary.csv"), &csv_text(summary)?)?;
    let code = if points.iter().any(|p| p.best_value.is_defined()) {
        EXIT_OK
    } else {
        EXIT_UNDEFINED
    };
    Ok((code, points))
}

/// Worst finite-difference error over `samples` random coefficient points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientReport {
    pub max_relative_error: f64,
    /// Components at the rounding floor, left out of the maximum.
    pub unresolved: usize,
    pub components: usize,
}

pub fn gradient_error(
    p: &Problem,
    rp: &RelaxParams,
    samples: usize,
    seed: u64,
    corrupt_adjoint: bool,
) -> Result<GradientReport> {
    let relaxed = relaxed_objective(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.cg.edge_count();
    let mut report = GradientReport {
        max_relative_error: 0.0,
        unresolved: 0,
        components: 0,
    };
    for _ in 0..samples {
        let mut point = None;
        for _ in 0..MAX_REDRAWS {
            let c = crate::model::Coefficients((0..n).map(|_| StandardNormal.sample(&mut rng)).collect());
            if smooth_at(&relaxed, &p.cg, &c, rp)? {
                point = Some(c);
                break;
            }
        }
        let c = point.ok_or(Error::NoSmoothPoint(MAX_REDRAWS))?;
        let d = difference_components(&relaxed, &p.cg, &c, rp, GRADIENT_STEP, corrupt_adjoint)?;
        report.max_relative_error = report.max_relative_error.max(d.max_resolved_error());
        report.unresolved += d.unresolved_count();
        report.components += n;
    }
    Ok(report)
}

pub fn check_gradients(m: &RunManifest, samples: usize, corrupt_adjoint: bool) -> Result<(u8, GradientReport)> {
    let loaded = load_problem(&m.graph_path, &m.objective_path, m.memory_count, m.direction)?;
    let r = gradient_error(&loaded.problem, &m.optimizer.relax, samples, m.optimizer.seed, corrupt_adjoint)?;
    let code = if r.max_relative_error <= GRADIENT_TOLERANCE { EXIT_OK } else { EXIT_GRADIENT_MISMATCH };
    Ok((code, r))
}

/// Evaluates a strategy file; the report lists the value, components and
/// the realizing BSCC.
pub fn eval_strategy(graph: &Path, objective: &Path, memory: usize, direction: Option<Direction>, strategy: &Path) -> Result<(u8, Value)> {
    let loaded = load_problem(graph, objective, memory, direction)?;
    let p = &loaded.problem;
    let s = load_strategy(&p.cg, strategy)?;
    let (v, b) = sigma_value(p, &s);
    let components: serde_json::Map<String, Value> = loaded
        .component_values(&s, b.as_ref())
        .into_iter()
        .map(|(n, v)| (n, value_json(v)))
        .collect();
    let report = json!({
        "value": value_json(v),
        "direction": p.direction,
        "components": components,
        "bscc": b.as_ref().map(|b| b.members.iter().map(|&c| p.cg.config_label(c)).collect::<Vec<_>>()),
        "support": support_text(&p.cg, b.as_ref()),
    });
    Ok((if v.is_defined() { EXIT_OK } else { EXIT_UNDEFINED }, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_roundtrip_and_undirected() {
        let g = parse_graph(
            r#"{"vertices": ["a", "b", "c"], "undirected": true,
                "edges": [{"from": "a", "to": "b", "tm": 2}, {"from": "b", "to": "c", "tm": 5}]}"#,
            "inline",
        )
        .unwrap();
        assert_eq!(g.edges().len(), 4);
        assert_eq!(parse_graph(&write_graph(&g), "again").unwrap(), g);
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse_graph("{\n  \"vertices\": [\"a\",\n  }", "bad.json").unwrap_err();
        let Error::Parse { line, source_name, .. } = err else { panic!("{err:?}") };
        assert_eq!((line, source_name.as_str()), (3, "bad.json"));
        let err = parse_graph(r#"{"vertices": ["a", "b"], "edges": [{"from": "a", "to": "b", "tm": 1}]}"#, "x");
        assert!(matches!(err, Err(Error::NotStronglyConnected { .. })));
    }

    #[test]
    fn objective_file_shapes() {
        let b = parse_objective(r#"{"builtin": "mp", "alpha": {"a": 1}}"#, "o").unwrap();
        assert!(matches!(b, ObjectiveFile::Builtin(_)));
        let a = parse_objective(
            r#"{"direction": "maximize", "objective": {"kind": "const", "args": 2.0}}"#,
            "o",
        )
        .unwrap();
        assert_eq!(
            a,
            ObjectiveFile::Ast {
                direction: Direction::Maximize,
                expr: Expr::Const(2.0),
                components: Vec::new()
            }
        );
        assert!(parse_objective(r#"{"kind": "const", "args": 1.0}"#, "o").is_ok());
        assert!(parse_objective(r#"{"kind": "nope"}"#, "o").is_err());
    }

    #[test]
    fn strategy_roundtrip() {
        let g = Graph::new(&["a", "b"], &[("a", "a", 1), ("a", "b", 1), ("b", "a", 1)]).unwrap();
        let cg = build_config_graph(&g, 2).unwrap();
        let s = crate::model::softmax_strategy(&cg, &crate::model::Coefficients((0..cg.edge_count()).map(|i| i as f64 / 3.0).collect()));
        let text = write_strategy(&cg, &s);
        assert_eq!(parse_strategy(&cg, &text, "s").unwrap(), s);
        let f = strategy_file(&cg, &s);
        assert_eq!(f.rows.len(), 4);
        assert_eq!(f.rows[0].successors.len(), 4);
    }
}
