//! Objective expressions.
//!
//! [`Expr`] is the serializable syntax tree: JSON objects of the form
//! `{"kind": ..., "args": ...}` with vertices referenced by name.
//! [`compile`] resolves every reference against a [`ConfigGraph`], checks the
//! denominator grammar and produces a [`Compiled`] tree that both the exact
//! evaluator and the differentiable evaluator walk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ConfigGraph;

/// Placeholder names usable inside templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigPlaceholder {
    /// Source configuration of the bound edge.
    From,
    /// Target configuration of the bound edge.
    To,
    /// The bound configuration of a configuration template.
    Config,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgePlaceholder {
    Edge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConfigRef {
    Bound { bound: ConfigPlaceholder },
    Concrete { vertex: String, mem: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EdgeRef {
    Bound {
        bound: EdgePlaceholder,
    },
    Concrete {
        from: String,
        to: String,
        mem_from: usize,
        mem_to: usize,
    },
}

impl EdgeRef {
    pub fn bound() -> Self {
        EdgeRef::Bound {
            bound: EdgePlaceholder::Edge,
        }
    }

    pub fn concrete(from: &str, to: &str, mem_from: usize, mem_to: usize) -> Self {
        EdgeRef::Concrete {
            from: from.into(),
            to: to.into(),
            mem_from,
            mem_to,
        }
    }
}

impl ConfigRef {
    pub fn at(vertex: &str, mem: usize) -> Self {
        ConfigRef::Concrete {
            vertex: vertex.into(),
            mem,
        }
    }

    pub fn bound(p: ConfigPlaceholder) -> Self {
        ConfigRef::Bound { bound: p }
    }
}

/// The configuration set `U × M` for a vertex set `U`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSet {
    pub vertices: Vec<String>,
}

impl TargetSet {
    pub fn of<S: AsRef<str>>(vertices: &[S]) -> Self {
        TargetSet {
            vertices: vertices.iter().map(|v| v.as_ref().to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigName {
    pub vertex: String,
    pub mem: usize,
}

/// Restricts which edges a template ranges over. Empty filter = all edges.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_vertices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_config: Option<ConfigName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_vertices: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertices: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Add,
    Min,
    Max,
    SoftMin,
    SoftMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template<F> {
    pub combiner: Combiner,
    #[serde(default)]
    pub filter: F,
    pub template: Box<Expr>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "args", rename_all = "snake_case")]
pub enum Expr {
    Const(f64),
    HittingTime {
        from: ConfigRef,
        targets: TargetSet,
    },
    SquaredHittingTime {
        from: ConfigRef,
        targets: TargetSet,
    },
    Freq(EdgeRef),
    Prob(EdgeRef),
    /// Traversal time of an edge.
    TravTime(EdgeRef),
    /// `clamp(gate_scale * p(e), 0, 1)`; produced by relaxation.
    Gate(EdgeRef),
    Add(Vec<Expr>),
    Mul(Vec<Expr>),
    Div {
        num: Box<Expr>,
        den: Box<Expr>,
    },
    Min(Vec<Expr>),
    Max(Vec<Expr>),
    /// Temperature-scaled log-sum-exp lower bound of `Min`.
    SoftMin(Vec<Expr>),
    /// Temperature-scaled log-sum-exp upper bound of `Max`.
    SoftMax(Vec<Expr>),
    Sqrt(Box<Expr>),
    OverActiveEdges(Template<EdgeFilter>),
    OverAllEdges(Template<EdgeFilter>),
    OverActiveConfigs(Template<ConfigFilter>),
    OverAllConfigs(Template<ConfigFilter>),
}

impl Expr {
    pub fn kind(&self) -> &'static str {
        match self {
            Expr::Const(_) => "const",
            Expr::HittingTime { .. } => "hitting_time",
            Expr::SquaredHittingTime { .. } => "squared_hitting_time",
            Expr::Freq(_) => "freq",
            Expr::Prob(_) => "prob",
            Expr::TravTime(_) => "trav_time",
            Expr::Gate(_) => "gate",
            Expr::Add(_) => "add",
            Expr::Mul(_) => "mul",
            Expr::Div { .. } => "div",
            Expr::Min(_) => "min",
            Expr::Max(_) => "max",
            Expr::SoftMin(_) => "soft_min",
            Expr::SoftMax(_) => "soft_max",
            Expr::Sqrt(_) => "sqrt",
            Expr::OverActiveEdges(_) => "over_active_edges",
            Expr::OverAllEdges(_) => "over_all_edges",
            Expr::OverActiveConfigs(_) => "over_active_configs",
            Expr::OverAllConfigs(_) => "over_all_configs",
        }
    }

    pub fn div(num: Expr, den: Expr) -> Expr {
        Expr::Div {
            num: Box::new(num),
            den: Box::new(den),
        }
    }

    pub fn sqrt(e: Expr) -> Expr {
        Expr::Sqrt(Box::new(e))
    }

    pub fn hitting(from: ConfigRef, targets: TargetSet) -> Expr {
        Expr::HittingTime { from, targets }
    }

    pub fn squared_hitting(from: ConfigRef, targets: TargetSet) -> Expr {
        Expr::SquaredHittingTime { from, targets }
    }

    pub fn over_active_edges(combiner: Combiner, filter: EdgeFilter, template: Expr) -> Expr {
        Expr::OverActiveEdges(Template {
            combiner,
            filter,
            template: Box::new(template),
        })
    }

    pub fn over_active_configs(combiner: Combiner, filter: ConfigFilter, template: Expr) -> Expr {
        Expr::OverActiveConfigs(Template {
            combiner,
            filter,
            template: Box::new(template),
        })
    }

    /// Number of `min`/`max` style nodes (including template combiners).
    pub fn minmax_count(&self) -> usize {
        let own = match self {
            Expr::Min(_) | Expr::Max(_) | Expr::SoftMin(_) | Expr::SoftMax(_) => 1,
            Expr::OverActiveEdges(t) | Expr::OverAllEdges(t) => {
                usize::from(t.combiner != Combiner::Add)
            }
            Expr::OverActiveConfigs(t) | Expr::OverAllConfigs(t) => {
                usize::from(t.combiner != Combiner::Add)
            }
            _ => 0,
        };
        own + self.children().iter().map(|c| c.minmax_count()).sum::<usize>()
    }

    pub fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Add(v)
            | Expr::Mul(v)
            | Expr::Min(v)
            | Expr::Max(v)
            | Expr::SoftMin(v)
            | Expr::SoftMax(v) => v.iter().collect(),
            Expr::Div { num, den } => vec![num, den],
            Expr::Sqrt(e) => vec![e],
            Expr::OverActiveEdges(t) | Expr::OverAllEdges(t) => vec![&t.template],
            Expr::OverActiveConfigs(t) | Expr::OverAllConfigs(t) => vec![&t.template],
            _ => Vec::new(),
        }
    }
}

/// Reference to a configuration after resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CRef {
    At(usize),
    BoundFrom,
    BoundTo,
    BoundConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ERef {
    At(usize),
    Bound,
}

/// Expression with every name resolved to an index.
#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Const(f64),
    Hit { from: CRef, set: usize },
    Hit2 { from: CRef, set: usize },
    Freq(ERef),
    Prob(ERef),
    TravTime(ERef),
    Gate(ERef),
    Add(Vec<Node>),
    Mul(Vec<Node>),
    Div(Box<Node>, Box<Node>),
    Min(Vec<Node>),
    Max(Vec<Node>),
    SoftMin(Vec<Node>),
    SoftMax(Vec<Node>),
    Sqrt(Box<Node>),
    OverEdges {
        active_only: bool,
        candidates: Vec<usize>,
        combiner: Combiner,
        body: Box<Node>,
    },
    OverConfigs {
        active_only: bool,
        candidates: Vec<usize>,
        combiner: Combiner,
        body: Box<Node>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Compiled {
    pub root: Node,
    /// Membership masks of the target sets, indexed by `Node::Hit::set`.
    pub target_sets: Vec<Vec<bool>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Binding {
    Nothing,
    Edge,
    Config,
}

struct Compiler<'a> {
    cg: &'a ConfigGraph,
    target_sets: Vec<Vec<bool>>,
}

impl Compiler<'_> {
    fn vertex(&self, name: &str) -> Result<usize> {
        self.cg
            .base()
            .vertex_index(name)
            .ok_or_else(|| Error::UnknownReference(format!("vertex `{name}`")))
    }

    fn config(&self, r: &ConfigRef, binding: Binding) -> Result<CRef> {
        match r {
            ConfigRef::Concrete { vertex, mem } => {
                let v = self.vertex(vertex)?;
                if *mem >= self.cg.memory_count() {
                    return Err(Error::UnknownReference(format!(
                        "memory state {mem} of `{vertex}`"
                    )));
                }
                Ok(CRef::At(self.cg.config_index(v, *mem)))
            }
            ConfigRef::Bound { bound } => match (bound, binding) {
                (ConfigPlaceholder::From, Binding::Edge) => Ok(CRef::BoundFrom),
                (ConfigPlaceholder::To, Binding::Edge) => Ok(CRef::BoundTo),
                (ConfigPlaceholder::Config, Binding::Config) => Ok(CRef::BoundConfig),
                _ => Err(Error::UnknownReference(format!(
                    "placeholder `{bound:?}` outside a matching template"
                ))),
            },
        }
    }

    fn edge(&self, r: &EdgeRef, binding: Binding) -> Result<ERef> {
        match r {
            EdgeRef::Concrete {
                from,
                to,
                mem_from,
                mem_to,
            } => {
                let a = self.config(&ConfigRef::at(from, *mem_from), binding)?;
                let b = self.config(&ConfigRef::at(to, *mem_to), binding)?;
                let (CRef::At(a), CRef::At(b)) = (a, b) else {
                    unreachable!("concrete refs resolve to indices")
                };
                self.cg
                    .edge_between(a, b)
                    .map(ERef::At)
                    .ok_or_else(|| Error::UnknownReference(format!("edge `{from}` -> `{to}`")))
            }
            EdgeRef::Bound { .. } if binding == Binding::Edge => Ok(ERef::Bound),
            EdgeRef::Bound { .. } => Err(Error::UnknownReference(
                "edge placeholder outside an edge template".into(),
            )),
        }
    }

    fn target_set(&mut self, t: &TargetSet) -> Result<usize> {
        let mut mask = vec![false; self.cg.config_count()];
        for name in &t.vertices {
            let v = self.vertex(name)?;
            for m in 0..self.cg.memory_count() {
                mask[self.cg.config_index(v, m)] = true;
            }
        }
        if let Some(i) = self.target_sets.iter().position(|s| *s == mask) {
            return Ok(i);
        }
        self.target_sets.push(mask);
        Ok(self.target_sets.len() - 1)
    }

    fn vertex_set(&self, names: &[String]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.cg.base().vertex_count()];
        for n in names {
            mask[self.vertex(n)?] = true;
        }
        Ok(mask)
    }

    fn edge_candidates(&self, f: &EdgeFilter) -> Result<Vec<usize>> {
        let from = f.from_vertices.as_deref().map(|v| self.vertex_set(v)).transpose()?;
        let to = f.to_vertices.as_deref().map(|v| self.vertex_set(v)).transpose()?;
        let from_config = match &f.from_config {
            Some(c) => match self.config(&ConfigRef::at(&c.vertex, c.mem), Binding::Nothing)? {
                CRef::At(i) => Some(i),
                _ => unreachable!(),
            },
            None => None,
        };
        Ok((0..self.cg.edge_count())
            .filter(|&i| {
                let e = &self.cg.edges()[i];
                let fv = self.cg.config(e.from).vertex;
                let tv = self.cg.config(e.to).vertex;
                from.as_ref().is_none_or(|m| m[fv])
                    && to.as_ref().is_none_or(|m| m[tv])
                    && from_config.is_none_or(|c| c == e.from)
            })
            .collect())
    }

    fn config_candidates(&self, f: &ConfigFilter) -> Result<Vec<usize>> {
        let vs = f.vertices.as_deref().map(|v| self.vertex_set(v)).transpose()?;
        Ok((0..self.cg.config_count())
            .filter(|&c| vs.as_ref().is_none_or(|m| m[self.cg.config(c).vertex]))
            .collect())
    }

    fn list(&mut self, v: &[Expr], binding: Binding) -> Result<Vec<Node>> {
        v.iter().map(|e| self.node(e, binding)).collect()
    }

    fn node(&mut self, e: &Expr, binding: Binding) -> Result<Node> {
        Ok(match e {
            Expr::Const(c) => {
                if !c.is_finite() {
                    return Err(Error::InvalidParameter(format!("non-finite constant {c}")));
                }
                Node::Const(*c)
            }
            Expr::HittingTime { from, targets } => Node::Hit {
                from: self.config(from, binding)?,
                set: self.target_set(targets)?,
            },
            Expr::SquaredHittingTime { from, targets } => Node::Hit2 {
                from: self.config(from, binding)?,
                set: self.target_set(targets)?,
            },
            Expr::Freq(r) => Node::Freq(self.edge(r, binding)?),
            Expr::Prob(r) => Node::Prob(self.edge(r, binding)?),
            Expr::TravTime(r) => Node::TravTime(self.edge(r, binding)?),
            Expr::Gate(r) => Node::Gate(self.edge(r, binding)?),
            Expr::Add(v) => Node::Add(self.list(v, binding)?),
            Expr::Mul(v) => Node::Mul(self.list(v, binding)?),
            Expr::Min(v) => Node::Min(self.list(v, binding)?),
            Expr::Max(v) => Node::Max(self.list(v, binding)?),
            Expr::SoftMin(v) => Node::SoftMin(self.list(v, binding)?),
            Expr::SoftMax(v) => Node::SoftMax(self.list(v, binding)?),
            Expr::Sqrt(a) => Node::Sqrt(Box::new(self.node(a, binding)?)),
            Expr::Div { num, den } => {
                check_denominator(den)?;
                Node::Div(
                    Box::new(self.node(num, binding)?),
                    Box::new(self.node(den, binding)?),
                )
            }
            Expr::OverActiveEdges(t) | Expr::OverAllEdges(t) => Node::OverEdges {
                active_only: matches!(e, Expr::OverActiveEdges(_)),
                candidates: self.edge_candidates(&t.filter)?,
                combiner: t.combiner,
                body: Box::new(self.node(&t.template, Binding::Edge)?),
            },
            Expr::OverActiveConfigs(t) | Expr::OverAllConfigs(t) => Node::OverConfigs {
                active_only: matches!(e, Expr::OverActiveConfigs(_)),
                candidates: self.config_candidates(&t.filter)?,
                combiner: t.combiner,
                body: Box::new(self.node(&t.template, Binding::Config)?),
            },
        })
    }
}

/// Denominators may only use constants, edge frequencies and probabilities
/// combined by addition and multiplication.
fn check_denominator(e: &Expr) -> Result<()> {
    match e {
        Expr::Const(_) | Expr::Freq(_) | Expr::Prob(_) => Ok(()),
        Expr::Add(v) | Expr::Mul(v) => v.iter().try_for_each(check_denominator),
        other => Err(Error::IllegalDenominator(format!(
            "`{}` node inside a denominator: {}",
            other.kind(),
            serde_json::to_string(other).unwrap_or_default()
        ))),
    }
}

pub fn compile(e: &Expr, cg: &ConfigGraph) -> Result<Compiled> {
    let mut c = Compiler {
        cg,
        target_sets: Vec::new(),
    };
    let root = c.node(e, Binding::Nothing)?;
    Ok(Compiled {
        root,
        target_sets: c.target_sets,
    })
}

/// Checks that `e` resolves against `cg` and obeys the denominator grammar.
pub fn validate_expr(e: &Expr, cg: &ConfigGraph) -> Result<()> {
    compile(e, cg).map(|_| ())
}
