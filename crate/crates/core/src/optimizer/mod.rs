//! Multi-start derivative-free maximization of the key rate.
//!
//! The free variables live in a unit cube (log or linear per variable).
//! Starting points come from a shifted Halton sequence; the feasible ones
//! with the highest rate seed independent Nelder–Mead runs, each restarted
//! from its own best point with a shrinking simplex until it stops
//! improving. Restarts run concurrently and are reduced in index order, so
//! the result depends only on the seed.

pub mod nelder_mead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{arm_transmittances, Arms, LinkGeometry, SystemParams};
use crate::decoy::FluctuationPolicy;
use crate::error::{invalid, Error, Result};
use crate::keyrate::{key_rate_for_arms, ProtocolParams, RateBreakdown};
use crate::parallel::Execution;
use nelder_mead::{maximize, NmOptions};

/// Box bounds of one variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
    /// Search in `ln` space.
    #[serde(default)]
    pub log: bool,
}

impl Bound {
    pub const fn log(lo: f64, hi: f64) -> Self {
        Self { lo, hi, log: true }
    }

    pub const fn linear(lo: f64, hi: f64) -> Self {
        Self { lo, hi, log: false }
    }

    fn validate(&self, name: &'static str) -> Result<()> {
        let ok = self.lo.is_finite()
            && self.hi.is_finite()
            && self.lo < self.hi
            && (!self.log || self.lo > 0.0);
        if ok {
            Ok(())
        } else {
            Err(invalid(
                name,
                format!("bad bounds [{}, {}]", self.lo, self.hi),
            ))
        }
    }

    /// Maps `t` in `[0, 1]` into the box.
    pub fn map(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        if t == 1.0 {
            self.hi
        } else if self.log {
            (self.lo.ln() + t * (self.hi.ln() - self.lo.ln()))
                .exp()
                .clamp(self.lo, self.hi)
        } else {
            self.lo + t * (self.hi - self.lo)
        }
    }

    /// Inverse of [`Bound::map`], clamped to `[0, 1]`.
    pub fn unmap(&self, x: f64) -> f64 {
        let t = if self.log {
            (x.ln() - self.lo.ln()) / (self.hi.ln() - self.lo.ln())
        } else {
            (x - self.lo) / (self.hi - self.lo)
        };
        t.clamp(0.0, 1.0)
    }
}

/// Variables that can be searched over. Alice's intensities are tied to
/// Bob's so that both arrive at the beam splitter equally bright.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    UB,
    VB,
    WB,
    EpsA,
    EpsB,
    PZa,
    PZb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizationSpec {
    pub u_b: Bound,
    pub v_b: Bound,
    pub w_b: Bound,
    pub eps: Bound,
    pub p_z: Bound,
    /// Use one sending probability for both users.
    pub tie_eps: bool,
    /// Use one Z-window probability for both users.
    pub tie_p_z: bool,
    /// Candidate slice counts; `None` keeps `SystemParams::m_slices`.
    pub m_grid: Option<Vec<u32>>,
    pub restarts: usize,
    /// Quasi-random candidates drawn per restart.
    pub candidates_per_restart: usize,
    /// Evaluations shared by all restarts, not counting the candidates.
    pub budget: usize,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for OptimizationSpec {
    fn default() -> Self {
        Self {
            u_b: Bound::log(1e-2, 1.0),
            v_b: Bound::log(1e-3, 1.0),
            w_b: Bound::log(1e-4, 0.5),
            eps: Bound::log(1e-4, 0.5),
            p_z: Bound::linear(0.05, 0.99),
            tie_eps: true,
            tie_p_z: false,
            m_grid: None,
            restarts: 16,
            candidates_per_restart: 4,
            budget: 6400,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

/// Slice counts searched when `m_grid` is requested without a list.
pub const DEFAULT_M_GRID: [u32; 6] = [4, 8, 12, 16, 24, 32];

impl OptimizationSpec {
    pub fn validate(&self) -> Result<()> {
        self.u_b.validate("u_b")?;
        self.v_b.validate("v_b")?;
        self.w_b.validate("w_b")?;
        self.eps.validate("eps")?;
        self.p_z.validate("p_z")?;
        if self.eps.hi > 1.0 || self.p_z.lo < 0.0 || self.p_z.hi > 1.0 {
            return Err(invalid("eps/p_z", "probability bounds must lie in [0, 1]"));
        }
        if self.restarts == 0 || self.candidates_per_restart == 0 {
            return Err(invalid(
                "restarts",
                "need at least one restart and one candidate",
            ));
        }
        if let Some(grid) = &self.m_grid {
            if grid.is_empty() || grid.iter().any(|&m| m < 2) {
                return Err(invalid(
                    "m_grid",
                    "slice counts must be >= 2 and the grid non-empty",
                ));
            }
        }
        Ok(())
    }

    pub fn free_variables(&self) -> Vec<Variable> {
        let mut vars = vec![Variable::UB, Variable::VB, Variable::WB, Variable::EpsA];
        if !self.tie_eps {
            vars.push(Variable::EpsB);
        }
        vars.push(Variable::PZa);
        if !self.tie_p_z {
            vars.push(Variable::PZb);
        }
        vars
    }

    fn bound(&self, var: Variable) -> Bound {
        match var {
            Variable::UB => self.u_b,
            Variable::VB => self.v_b,
            Variable::WB => self.w_b,
            Variable::EpsA | Variable::EpsB => self.eps,
            Variable::PZa | Variable::PZb => self.p_z,
        }
    }

    /// Protocol parameters at unit-cube point `t` for the given arms.
    pub fn decode(&self, t: &[f64], arms: Arms, m_slices: Option<u32>) -> ProtocolParams {
        let vars = self.free_variables();
        let get = |var: Variable| {
            vars.iter()
                .position(|&v| v == var)
                .map(|i| self.bound(var).map(t[i]))
        };
        let u_b = get(Variable::UB).expect("u_b is always free");
        let v_b = get(Variable::VB).expect("v_b is always free");
        let w_b = get(Variable::WB).expect("w_b is always free");
        let eps_a = get(Variable::EpsA).expect("eps_a is always free");
        let p_za = get(Variable::PZa).expect("p_za is always free");
        let mut params = ProtocolParams::matched(u_b, v_b, w_b, eps_a, p_za, arms);
        params.eps_b = get(Variable::EpsB).unwrap_or(eps_a);
        params.p_zb = get(Variable::PZb).unwrap_or(p_za);
        params.m_slices = m_slices;
        params
    }
}

/// Progress of one restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    /// Starting point in unit-cube coordinates.
    pub start: Vec<f64>,
    pub start_value: f64,
    /// Best objective after every simplex iteration.
    pub best_so_far: Vec<f64>,
    pub final_value: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub params: ProtocolParams,
    pub breakdown: RateBreakdown,
    pub evaluations: usize,
    pub m_slices: u32,
    pub restarts: Vec<RestartTrace>,
}

/// Objective value. Positive rates are used as they are. A non-positive
/// rate maps to the relative margin `(S - L) / (S + L)` in `[-1, 0]`, where
/// `S` is the single-photon term and `L` the leakage; unlike the raw rate,
/// this does not flatten out as every intensity and probability shrinks.
/// Invalid points get a penalty below -1 graded by constraint violation.
pub fn objective(outcome: &Result<RateBreakdown>) -> f64 {
    match outcome {
        Ok(b) if b.r_raw > 0.0 => b.r_raw,
        Ok(b) => {
            let total = b.single_photon_term + b.leakage_term;
            if total > 0.0 && total.is_finite() {
                (b.single_photon_term - b.leakage_term) / total
            } else {
                -1.0
            }
        }
        Err(Error::Constraints(report)) => -1.0 - report.severity(),
        Err(_) => -2.0,
    }
}

fn halton(index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Halton points with a seed-dependent Cranley–Patterson rotation.
fn candidates(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    (1..=count as u64)
        .map(|i| {
            (0..dim)
                .map(|d| (halton(i, PRIMES[d]) + shift[d]).fract())
                .collect()
        })
        .collect()
}

/// Maximizes the key rate on the given arms.
pub fn optimize_arms(
    sys: &SystemParams,
    arms: Arms,
    spec: &OptimizationSpec,
    policy: &FluctuationPolicy,
) -> Result<OptimizationResult> {
    spec.validate()?;
    sys.validate()?;
    let grid: Vec<Option<u32>> = match &spec.m_grid {
        None => vec![None],
        Some(g) => g.iter().map(|&m| Some(m)).collect(),
    };
    let mut best: Option<OptimizationResult> = None;
    let mut total_evals = 0;
    let mut last_err = None;
    for m in grid {
        match optimize_fixed_m(sys, arms, spec, policy, m) {
            Ok(res) => {
                total_evals += res.evaluations;
                let better = best
                    .as_ref()
                    .is_none_or(|b| res.breakdown.r_raw > b.breakdown.r_raw);
                if better {
                    best = Some(res);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some(mut res) => {
            res.evaluations = total_evals;
            Ok(res)
        }
        None => Err(last_err.expect("grid is non-empty")),
    }
}

fn optimize_fixed_m(
    sys: &SystemParams,
    arms: Arms,
    spec: &OptimizationSpec,
    policy: &FluctuationPolicy,
    m: Option<u32>,
) -> Result<OptimizationResult> {
    let dim = spec.free_variables().len();
    let eval = |t: &[f64]| key_rate_for_arms(sys, arms, &spec.decode(t, arms, m), policy);

    let tried = spec.restarts * spec.candidates_per_restart;
    let points = candidates(tried, dim, spec.seed);
    let scored: Vec<(f64, Option<String>)> = spec.execution.map_indexed(tried, |i| {
        let out = eval(&points[i]);
        let note = out.as_ref().err().map(ToString::to_string);
        (objective(&out), note)
    });
    let mut feasible: Vec<usize> = (0..tried).filter(|&i| scored[i].1.is_none()).collect();
    if feasible.is_empty() {
        let mut notes: Vec<String> = scored.iter().filter_map(|(_, n)| n.clone()).collect();
        notes.sort();
        notes.dedup();
        notes.truncate(5);
        return Err(Error::NoFeasibleStart {
            tried,
            diagnostics: notes.join(" | "),
        });
    }
    feasible.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0).then(a.cmp(&b)));
    feasible.truncate(spec.restarts);

    let n_runs = feasible.len();
    let traces: Vec<(RestartTrace, Vec<f64>)> = spec.execution.map_indexed(n_runs, |r| {
        let share = spec.budget / n_runs + usize::from(r < spec.budget % n_runs);
        let start = points[feasible[r]].clone();
        let start_value = scored[feasible[r]].0;
        run_restart(|t| objective(&eval(t)), start, start_value, share)
    });

    let mut best_run = 0;
    for (r, (trace, _)) in traces.iter().enumerate() {
        if trace.final_value > traces[best_run].0.final_value {
            best_run = r;
        }
    }
    // Restarts that never reach a positive rate all score in [-1, 0]; the
    // reported optimum is still the best of them.
    let best_t = &traces[best_run].1;
    let params = spec.decode(best_t, arms, m);
    let breakdown = key_rate_for_arms(sys, arms, &params, policy)?;
    let evaluations = tried + traces.iter().map(|(t, _)| t.evaluations).sum::<usize>();
    Ok(OptimizationResult {
        params,
        m_slices: breakdown.m_slices,
        breakdown,
        evaluations,
        restarts: traces.into_iter().map(|(t, _)| t).collect(),
    })
}

/// Relative gain below which a restart round counts as converged.
const ROUND_IMPROVEMENT: f64 = 1e-4;
const MAX_ROUNDS: usize = 6;

fn run_restart(
    mut f: impl FnMut(&[f64]) -> f64,
    start: Vec<f64>,
    start_value: f64,
    budget: usize,
) -> (RestartTrace, Vec<f64>) {
    let mut x = start.clone();
    let mut fx = start_value;
    let mut used = 0;
    let mut best_so_far = Vec::new();
    let mut scale = 0.2;
    for _ in 0..MAX_ROUNDS {
        if used >= budget {
            break;
        }
        let opts = NmOptions {
            max_evals: budget - used,
            initial_scale: scale,
            ..NmOptions::default()
        };
        let out = maximize(&mut f, &x, fx, opts);
        used += out.evals;
        let improved = out.f > fx + ROUND_IMPROVEMENT * fx.abs();
        if out.f > fx {
            x = out.x;
            fx = out.f;
        }
        for &v in &out.history {
            let prev = best_so_far.last().copied().unwrap_or(start_value);
            best_so_far.push(v.max(prev));
        }
        if !improved {
            break;
        }
        scale *= 0.5;
    }
    let trace = RestartTrace {
        start,
        start_value,
        best_so_far,
        final_value: fx,
        evaluations: used,
    };
    (trace, x)
}

/// Maximizes the key rate for a link geometry.
pub fn optimize(
    sys: &SystemParams,
    geom: &LinkGeometry,
    spec: &OptimizationSpec,
    policy: &FluctuationPolicy,
) -> Result<OptimizationResult> {
    let arms = arm_transmittances(sys, geom)?;
    optimize_arms(sys, arms, spec, policy)
}

/// Turns the link into a symmetric one by attenuating the short arm down
/// to `eta_b`, then optimizes with identical settings for both users.
pub fn symmetric_baseline(
    sys: &SystemParams,
    geom: &LinkGeometry,
    spec: &OptimizationSpec,
    policy: &FluctuationPolicy,
) -> Result<OptimizationResult> {
    let arms = arm_transmittances(sys, geom)?;
    let attenuated = Arms {
        eta_a: arms.eta_b,
        eta_b: arms.eta_b,
    };
    let sym_spec = OptimizationSpec {
        tie_eps: true,
        tie_p_z: true,
        ..spec.clone()
    };
    optimize_arms(sys, attenuated, &sym_spec, policy)
}
