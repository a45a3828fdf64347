//! Gradient-based strategy search: Adam on softmax coefficients with
//! decaying gradient noise, cutoff rounding and best-value tracking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{sigma_value, Direction, EvalValue, Problem};
use crate::expr::{compile, Compiled};
use crate::model::{cutoff, softmax_strategy, Coefficients, Strategy, DEFAULT_CUTOFF};
use crate::relax::{eval_with_gradient, relax, RelaxParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub noise_initial_std: f64,
    /// Steps per halving of the noise; `None` means `steps / 10`.
    pub noise_halflife: Option<f64>,
    pub cutoff_threshold: f64,
    pub relax: RelaxParams,
    /// Geometric soft-min/max temperature schedule from the first to the
    /// last step; overrides `relax.softminmax_temperature` when set.
    pub temperature_anneal: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            steps: 2000,
            learning_rate: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            noise_initial_std: 0.1,
            noise_halflife: None,
            cutoff_threshold: DEFAULT_CUTOFF,
            relax: RelaxParams::default(),
            temperature_anneal: Some((1.0, 0.01)),
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        if !(self.noise_initial_std >= 0.0) {
            return bad("noise_initial_std must be nonnegative");
        }
        if self.noise_halflife.is_some_and(|h| !(h > 0.0)) {
            return bad("noise_halflife must be positive");
        }
        if !(0.0..1.0).contains(&self.cutoff_threshold) {
            return bad("cutoff_threshold must lie in [0, 1)");
        }
        if let Some((a, b)) = self.temperature_anneal {
            if !(a > 0.0 && b > 0.0) {
                return bad("annealed temperatures must be positive");
            }
        }
        self.relax.validate()
    }

    pub fn halflife(&self) -> f64 {
        self.noise_halflife.unwrap_or(self.steps as f64 / 10.0)
    }

    pub fn noise_std(&self, step: usize) -> f64 {
        self.noise_initial_std * (-(step as f64) / self.halflife()).exp2()
    }

    pub fn relax_at(&self, step: usize) -> RelaxParams {
        let mut rp = self.relax;
        if let Some((t0, t1)) = self.temperature_anneal {
            let frac = if self.steps > 1 {
                step as f64 / (self.steps - 1) as f64
            } else {
                0.0
            };
            rp.softminmax_temperature = t0 * (t1 / t0).powf(frac);
        }
        rp
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    /// Relaxed objective before the update; NaN if the step failed.
    pub relaxed: f64,
    /// σ-value of the rounded strategy after the update.
    pub value: EvalValue,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub seed: u64,
    pub best_strategy: Strategy,
    pub best_value: EvalValue,
    /// `None` when no step produced a defined value.
    pub best_step: Option<usize>,
    pub value_trace: Vec<TracePoint>,
}

/// Adam state; `step` minimizes.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, b1: f64, b2: f64, eps: f64) -> Self {
        Adam {
            lr,
            b1,
            b2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * grad[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Standard normal coefficients drawn from the seeded generator.
pub fn initial_coefficients(n: usize, seed: u64) -> (Coefficients, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    (Coefficients(c), rng)
}

/// Runs one trial starting from `init`.
pub fn optimize_from(
    p: &Problem,
    relaxed: &Compiled,
    oc: &OptimizerConfig,
    init: Coefficients,
    mut rng: ChaCha8Rng,
) -> TrialResult {
    let cg = &p.cg;
    let sign = p.direction.sign();
    let mut c = init;
    let mut adam = Adam::new(
        c.0.len(),
        oc.learning_rate,
        oc.adam_beta1,
        oc.adam_beta2,
        oc.adam_epsilon,
    );
    let mut best_strategy = cutoff(cg, &softmax_strategy(cg, &c), oc.cutoff_threshold)
        .unwrap_or_else(|_| softmax_strategy(cg, &c));
    let mut best_value = EvalValue::Undefined;
    let mut best_step = None;
    let mut trace = Vec::with_capacity(oc.steps);
    for step in 0..oc.steps {
        let rp = oc.relax_at(step);
        let std = oc.noise_std(step);
        let relaxed_value = match eval_with_gradient(relaxed, cg, &c, &rp) {
            Ok((v, mut g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => {
                for gi in g.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *gi = sign * *gi + std * z;
                }
                adam.step(&mut c.0, &g);
                v
            }
            _ => {
                trace.push(TracePoint {
                    step,
                    relaxed: f64::NAN,
                    value: EvalValue::Undefined,
                });
                continue;
            }
        };
        let (value, rounded) = match cutoff(cg, &softmax_strategy(cg, &c), oc.cutoff_threshold) {
            Ok(s) => (sigma_value(p, &s).0, Some(s)),
            Err(_) => (EvalValue::Undefined, None),
        };
        if p.direction.improves(value, best_value) {
            best_value = value;
            best_step = Some(step);
            best_strategy = rounded.expect("defined values come from a rounded strategy");
        }
        trace.push(TracePoint {
            step,
            relaxed: relaxed_value,
            value,
        });
    }
    TrialResult {
        seed: oc.seed,
        best_strategy,
        best_value,
        best_step,
        value_trace: trace,
    }
}

/// Compiles the relaxed form of the problem's objective.
pub fn relaxed_objective(p: &Problem) -> Result<Compiled> {
    compile(&relax(&p.objective), &p.cg)
}

pub fn optimize(p: &Problem, oc: &OptimizerConfig) -> Result<TrialResult> {
    oc.validate()?;
    let relaxed = relaxed_objective(p)?;
    let (init, rng) = initial_coefficients(p.cg.edge_count(), oc.seed);
    Ok(optimize_from(p, &relaxed, oc, init, rng))
}

/// Trial `index` of a batch: seed `oc.seed + index`.
pub fn run_trial(p: &Problem, relaxed: &Compiled, oc: &OptimizerConfig, index: usize) -> TrialResult {
    let mut oc = oc.clone();
    oc.seed = oc.seed.wrapping_add(index as u64);
    let (init, rng) = initial_coefficients(p.cg.edge_count(), oc.seed);
    optimize_from(p, relaxed, &oc, init, rng)
}

/// Index of the best result per direction; ties keep the earliest.
pub fn best_index(direction: Direction, results: &[TrialResult]) -> usize {
    let mut best = 0;
    for (i, r) in results.iter().enumerate().skip(1) {
        if direction.improves(r.best_value, results[best].best_value) {
            best = i;
        }
    }
    best
}

/// Independent trials with seeds `oc.seed + i`, run in parallel and
/// returned in trial order.
pub fn run_trials(
    p: &Problem,
    oc: &OptimizerConfig,
    n_trials: usize,
) -> Result<(TrialResult, Vec<TrialResult>)> {
    if n_trials == 0 {
        return Err(Error::InvalidParameter("at least one trial is required".into()));
    }
    oc.validate()?;
    let relaxed = relaxed_objective(p)?;
    let all: Vec<TrialResult> = (0..n_trials)
        .into_par_iter()
        .map(|i| run_trial(p, &relaxed, oc, i))
        .collect();
    let best = all[best_index(p.direction, &all)].clone();
    Ok((best, all))
}
