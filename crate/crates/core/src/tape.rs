//! Reverse-mode differentiation tape with a linear-solve primitive.
//!
//! Values are computed eagerly while recording. [`Tape::gradient`] walks the
//! record backwards. A solve `A x = b` propagates `x̄` by solving
//! `Aᵀ w = x̄`, then adds `w` to `b̄` and `−w_i x_j` to `Ā_ij`.

use crate::error::Result;
use crate::linalg::{Lu, Matrix};

/// Handle to a recorded value.
pub type Var = usize;

/// Floor applied to `sqrt` arguments when forming the derivative.
pub const SQRT_DERIVATIVE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Const,
    /// `constant + Σ coeff · var`
    Linear {
        terms: Vec<(Var, f64)>,
        constant: f64,
    },
    Prod(Vec<Var>),
    Div(Var, Var),
    /// `sqrt(max(x, 0))`
    Sqrt(Var),
    /// `clamp(x, 0, 1)`
    HardTanh01(Var),
    /// `t · ln Σ exp(x_i / t)`
    Lse {
        args: Vec<Var>,
        t: f64,
    },
    /// Hard min or max; the adjoint flows to the first extremal argument.
    Select {
        args: Vec<Var>,
        max: bool,
    },
    /// Entry `pos` of the softmax of `row`.
    SoftmaxEntry {
        row: Vec<Var>,
        pos: usize,
    },
    /// Marker recorded before the outputs of a solve block.
    Solve(usize),
    SolveOutput {
        block: usize,
        index: usize,
    },
}

/// A recorded linear system. `A = a_const + Σ scale · var` over
/// `a_terms`, right-hand side `b_i = value(b[i])`.
#[derive(Clone, Debug)]
struct SolveBlock {
    a_const: Matrix,
    a_terms: Vec<(usize, usize, Var, f64)>,
    b: Vec<Var>,
    lu: Option<Lu>,
    x: Vec<f64>,
}

impl SolveBlock {
    fn run(&mut self, vals: &[f64]) -> Result<()> {
        let mut a = self.a_const.clone();
        for &(i, j, v, scale) in &self.a_terms {
            a[(i, j)] += scale * vals[v];
        }
        let rhs: Vec<f64> = self.b.iter().map(|&v| vals[v]).collect();
        let lu = Lu::factor(&a)?;
        self.x = lu.solve(&rhs);
        self.lu = Some(lu);
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<f64>,
    blocks: Vec<SolveBlock>,
    inputs: Vec<Var>,
    corrupt_adjoint: bool,
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn lse_weights(xs: &[f64], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = xs.iter().map(|x| x / t).collect();
    softmax(&scaled)
}

fn select_index(xs: &[f64], max: bool) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if (max && x > xs[best]) || (!max && x < xs[best]) {
            best = i;
        }
    }
    best
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: backpropagate solves through `A` instead of `Aᵀ`.
    pub fn with_corrupt_adjoint(mut self, on: bool) -> Self {
        self.corrupt_adjoint = on;
        self
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.vals[v]
    }

    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn forward(&self, op: &Op) -> f64 {
        let v = &self.vals;
        match op {
            Op::Input | Op::Const | Op::Solve(_) => unreachable!("leaf values are set directly"),
            Op::Linear { terms, constant } => {
                terms.iter().fold(*constant, |acc, &(x, c)| acc + c * v[x])
            }
            Op::Prod(args) => args.iter().fold(1.0, |acc, &x| acc * v[x]),
            Op::Div(a, b) => v[*a] / v[*b],
            Op::Sqrt(a) => v[*a].max(0.0).sqrt(),
            Op::HardTanh01(a) => v[*a].clamp(0.0, 1.0),
            Op::Lse { args, t } => {
                let xs: Vec<f64> = args.iter().map(|&x| v[x]).collect();
                crate::eval::lse(&xs, *t)
            }
            Op::Select { args, max } => {
                let xs: Vec<f64> = args.iter().map(|&x| v[x]).collect();
                xs[select_index(&xs, *max)]
            }
            Op::SoftmaxEntry { row, pos } => {
                let xs: Vec<f64> = row.iter().map(|&x| v[x]).collect();
                softmax(&xs)[*pos]
            }
            Op::SolveOutput { block, index } => self.blocks[*block].x[*index],
        }
    }

    fn push(&mut self, op: Op) -> Var {
        let val = self.forward(&op);
        self.ops.push(op);
        self.vals.push(val);
        self.vals.len() - 1
    }

    pub fn input(&mut self, x: f64) -> Var {
        self.ops.push(Op::Input);
        self.vals.push(x);
        let v = self.vals.len() - 1;
        self.inputs.push(v);
        v
    }

    pub fn constant(&mut self, x: f64) -> Var {
        self.ops.push(Op::Const);
        self.vals.push(x);
        self.vals.len() - 1
    }

    pub fn linear(&mut self, terms: Vec<(Var, f64)>, constant: f64) -> Var {
        self.push(Op::Linear { terms, constant })
    }

    pub fn sum(&mut self, args: &[Var]) -> Var {
        self.linear(args.iter().map(|&a| (a, 1.0)).collect(), 0.0)
    }

    pub fn prod(&mut self, args: Vec<Var>) -> Var {
        self.push(Op::Prod(args))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Div(a, b))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt(a))
    }

    pub fn hardtanh01(&mut self, a: Var) -> Var {
        self.push(Op::HardTanh01(a))
    }

    /// Log-sum-exp; `t < 0` gives the soft minimum.
    pub fn lse(&mut self, args: Vec<Var>, t: f64) -> Var {
        self.push(Op::Lse { args, t })
    }

    pub fn select(&mut self, args: Vec<Var>, max: bool) -> Var {
        self.push(Op::Select { args, max })
    }

    pub fn softmax_row(&mut self, row: &[Var]) -> Vec<Var> {
        (0..row.len())
            .map(|pos| {
                self.push(Op::SoftmaxEntry {
                    row: row.to_vec(),
                    pos,
                })
            })
            .collect()
    }

    /// Records the solution of `(a_const + Σ scale·var) x = b`.
    pub fn solve(
        &mut self,
        a_const: Matrix,
        a_terms: Vec<(usize, usize, Var, f64)>,
        b: Vec<Var>,
    ) -> Result<Vec<Var>> {
        let n = b.len();
        assert_eq!(a_const.dim(), n, "dimension mismatch");
        let mut block = SolveBlock {
            a_const,
            a_terms,
            b,
            lu: None,
            x: Vec::new(),
        };
        block.run(&self.vals)?;
        let id = self.blocks.len();
        self.blocks.push(block);
        self.ops.push(Op::Solve(id));
        self.vals.push(0.0);
        Ok((0..n)
            .map(|index| self.push(Op::SolveOutput { block: id, index }))
            .collect())
    }

    /// Recomputes every recorded value from new input values.
    pub fn replay(&mut self, inputs: &[f64]) -> Result<()> {
        assert_eq!(inputs.len(), self.inputs.len(), "input count mismatch");
        for (&v, &x) in self.inputs.iter().zip(inputs) {
            self.vals[v] = x;
        }
        for i in 0..self.ops.len() {
            match &self.ops[i] {
                Op::Input | Op::Const => {}
                Op::Solve(id) => {
                    let id = *id;
                    let mut block = std::mem::replace(
                        &mut self.blocks[id],
                        SolveBlock {
                            a_const: Matrix::zeros(0),
                            a_terms: Vec::new(),
                            b: Vec::new(),
                            lu: None,
                            x: Vec::new(),
                        },
                    );
                    let r = block.run(&self.vals);
                    self.blocks[id] = block;
                    r?;
                }
                op => {
                    let op = op.clone();
                    self.vals[i] = self.forward(&op);
                }
            }
        }
        Ok(())
    }

    /// Adjoints of every recorded value with respect to `output`.
    pub fn adjoints(&self, output: Var) -> Vec<f64> {
        let v = &self.vals;
        let mut bar = vec![0.0; self.ops.len()];
        let mut xbar: Vec<Vec<f64>> = self.blocks.iter().map(|b| vec![0.0; b.b.len()]).collect();
        bar[output] = 1.0;
        for i in (0..=output).rev() {
            let g = bar[i];
            match &self.ops[i] {
                Op::Input | Op::Const => {}
                Op::Solve(id) => {
                    let block = &self.blocks[*id];
                    let xb = &xbar[*id];
                    if xb.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let lu = block.lu.as_ref().expect("factored during recording");
                    let w = if self.corrupt_adjoint {
                        lu.solve(xb)
                    } else {
                        lu.solve_transpose(xb)
                    };
                    for (k, &bv) in block.b.iter().enumerate() {
                        bar[bv] += w[k];
                    }
                    for &(r, c, av, scale) in &block.a_terms {
                        bar[av] -= scale * w[r] * block.x[c];
                    }
                }
                _ if g == 0.0 => {}
                Op::Linear { terms, .. } => {
                    for &(x, c) in terms {
                        bar[x] += g * c;
                    }
                }
                Op::Prod(args) => {
                    for (k, &x) in args.iter().enumerate() {
                        let others: f64 = args
                            .iter()
                            .enumerate()
                            .filter(|&(j, _)| j != k)
                            .map(|(_, &y)| v[y])
                            .product();
                        bar[x] += g * others;
                    }
                }
                Op::Div(a, b) => {
                    bar[*a] += g / v[*b];
                    bar[*b] -= g * v[*a] / (v[*b] * v[*b]);
                }
                Op::Sqrt(a) => {
                    bar[*a] += g * 0.5 / v[*a].max(SQRT_DERIVATIVE_FLOOR).sqrt();
                }
                Op::HardTanh01(a) => {
                    if v[*a] > 0.0 && v[*a] < 1.0 {
                        bar[*a] += g;
                    }
                }
                Op::Lse { args, t } => {
                    let xs: Vec<f64> = args.iter().map(|&x| v[x]).collect();
                    for (&x, w) in args.iter().zip(lse_weights(&xs, *t)) {
                        bar[x] += g * w;
                    }
                }
                Op::Select { args, max } => {
                    let xs: Vec<f64> = args.iter().map(|&x| v[x]).collect();
                    bar[args[select_index(&xs, *max)]] += g;
                }
                Op::SoftmaxEntry { row, pos } => {
                    let xs: Vec<f64> = row.iter().map(|&x| v[x]).collect();
                    let p = softmax(&xs);
                    for (j, &x) in row.iter().enumerate() {
                        let d = if j == *pos { p[*pos] * (1.0 - p[j]) } else { -p[*pos] * p[j] };
                        bar[x] += g * d;
                    }
                }
                Op::SolveOutput { block, index } => xbar[*block][*index] += g,
            }
        }
        bar
    }

    /// Gradient of `output` with respect to the inputs, in creation order.
    pub fn gradient(&self, output: Var) -> Vec<f64> {
        let bar = self.adjoints(output);
        self.inputs.iter().map(|&v| bar[v]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs()))
    }

    #[test]
    fn scalar_rules() {
        let build = |x: &[f64]| {
            let mut t = Tape::new();
            let a = t.input(x[0]);
            let b = t.input(x[1]);
            let p = t.prod(vec![a, b, b]);
            let q = t.div(p, b);
            let r = t.sqrt(q);
            let l = t.linear(vec![(r, 2.0), (a, -1.0)], 3.0);
            let s = t.lse(vec![l, a, b], 0.5);
            let m = t.lse(vec![s, b], -0.3);
            (t, m)
        };
        let x = [1.3, 0.7];
        let (t, out) = build(&x);
        let g = t.gradient(out);
        let n = fd(|x| { let (t, o) = build(x); t.value(o) }, &x, 1e-6);
        assert!(close(&g, &n, 1e-7), "{g:?} vs {n:?}");
    }

    #[test]
    fn softmax_jacobian() {
        let build = |x: &[f64]| {
            let mut t = Tape::new();
            let c: Vec<Var> = x.iter().map(|&v| t.input(v)).collect();
            let p = t.softmax_row(&c);
            let out = t.linear(vec![(p[0], 1.0), (p[2], 3.0)], 0.0);
            (t, out)
        };
        let x = [0.2, -1.0, 0.5];
        let (t, out) = build(&x);
        let n = fd(|x| { let (t, o) = build(x); t.value(o) }, &x, 1e-6);
        assert!(close(&t.gradient(out), &n, 1e-7));
    }

    #[test]
    fn solve_adjoint_matches_finite_differences() {
        let build = |x: &[f64], corrupt: bool| {
            let mut t = Tape::new().with_corrupt_adjoint(corrupt);
            let v: Vec<Var> = x.iter().map(|&x| t.input(x)).collect();
            let sol = t
                .solve(
                    Matrix::identity(2),
                    vec![(0, 1, v[0], -1.0), (1, 0, v[1], -1.0), (1, 1, v[2], 1.0)],
                    vec![v[2], v[3]],
                )
                .unwrap();
            let out = t.linear(vec![(sol[0], 1.0), (sol[1], 2.0)], 0.0);
            (t, out)
        };
        let x = [0.3, 0.6, 0.4, 1.5];
        let (t, out) = build(&x, false);
        let n = fd(|x| { let (t, o) = build(x, false); t.value(o) }, &x, 1e-6);
        assert!(close(&t.gradient(out), &n, 1e-6));
        let (bad, out) = build(&x, true);
        assert!(!close(&bad.gradient(out), &n, 1e-3));
    }

    #[test]
    fn geometric_hitting_time_derivative() {
        // T = 1 + (1 - p) T, so T = 1/p and dT/dp = -1/p².
        let mut t = Tape::new();
        let p = t.input(0.5);
        let one = t.constant(1.0);
        let sol = t.solve(Matrix::zeros(1), vec![(0, 0, p, 1.0)], vec![one]).unwrap();
        assert!((t.value(sol[0]) - 2.0).abs() < 1e-15);
        assert!((t.gradient(sol[0])[0] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn replay_reproduces_values() {
        let build = |x: &[f64]| {
            let mut t = Tape::new();
            let v: Vec<Var> = x.iter().map(|&x| t.input(x)).collect();
            let p = t.softmax_row(&v);
            let sol = t
                .solve(Matrix::identity(2), vec![(0, 1, p[0], -1.0), (1, 0, p[1], -0.5)], vec![p[0], p[1]])
                .unwrap();
            let out = t.prod(vec![sol[0], sol[1]]);
            (t, out)
        };
        let (mut t, out) = build(&[0.1, 0.4]);
        let (fresh, fout) = build(&[-0.3, 0.9]);
        t.replay(&[-0.3, 0.9]).unwrap();
        assert!((t.value(out) - fresh.value(fout)).abs() <= 1e-12);
        assert_eq!(t.gradient(out), fresh.gradient(fout));
    }
}
